//! Base estimators.
//!
//! The outcome model is fit by penalized weighted least squares,
//!
//! ```text
//! min over (v0, v):  (1/2n) sum_i a_i w_i (y_i - v0 - <x_i, v>)^2 + Omega(v),
//! ```
//!
//! and the propensity model by the penalized M-estimator
//!
//! ```text
//! min over (v0, v):  (1/2n) sum_i loss(v0 + <x_i, v>; a_i) + Omega(v).
//! ```
//!
//! The intercept is never penalized. Unpenalized OLS and logistic regression
//! are provided for the classical baselines.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::link::LinkFunction;
use crate::model::{Dataset, ModelSpec};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;

/// Convex coefficient penalty. Ridge is the only strongly smooth, strongly
/// convex penalty shipped; its Hessian is `lambda * I` on the whitened scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Ridge { lambda: f64 },
}

impl Penalty {
    pub fn ridge(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "ridge penalty needs lambda > 0, got {lambda}"
            )));
        }
        Ok(Self::Ridge { lambda })
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Self::Ridge { lambda } => *lambda,
        }
    }

    pub fn value(&self, v: &DVector<f64>) -> f64 {
        match self {
            Self::Ridge { lambda } => 0.5 * lambda * v.norm_squared(),
        }
    }

    pub fn grad(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Ridge { lambda } => v * *lambda,
        }
    }

    /// Eigenvalues of the penalty Hessian at the fit (constant for ridge).
    pub fn hessian_eigs(&self, p: usize) -> Vec<f64> {
        match self {
            Self::Ridge { lambda } => vec![*lambda; p],
        }
    }
}

/// Loss for the propensity M-estimator, convex in the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityLoss {
    /// `loss(eta; a) = ((a - 1/2) - eta)^2 / 2`; strongly convex with unit
    /// curvature everywhere.
    ShiftedSquare,
    /// `loss(eta; a) = log(1 + e^eta) - a eta`. Not strongly convex; kept for
    /// baseline replication only.
    Logistic,
}

impl PropensityLoss {
    pub fn value(&self, eta: f64, a: f64) -> f64 {
        match self {
            Self::ShiftedSquare => {
                let r = (a - 0.5) - eta;
                0.5 * r * r
            }
            Self::Logistic => crate::link::softplus(eta) - a * eta,
        }
    }

    pub fn d1(&self, eta: f64, a: f64) -> f64 {
        match self {
            Self::ShiftedSquare => eta - (a - 0.5),
            Self::Logistic => crate::link::logistic(eta) - a,
        }
    }

    pub fn d2(&self, eta: f64, _a: f64) -> f64 {
        match self {
            Self::ShiftedSquare => 1.0,
            Self::Logistic => {
                let s = crate::link::logistic(eta);
                s * (1.0 - s)
            }
        }
    }

    pub fn d3(&self, eta: f64, _a: f64) -> f64 {
        match self {
            Self::ShiftedSquare => 0.0,
            Self::Logistic => {
                let s = crate::link::logistic(eta);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }

    /// Whether the curvature is the same at every linear predictor.
    pub fn constant_curvature(&self) -> bool {
        matches!(self, Self::ShiftedSquare)
    }

    /// `prox[zeta * loss(.; a)](y)`: closed form for the shifted square,
    /// Newton otherwise.
    pub fn prox(&self, zeta: f64, a: f64, y: f64) -> f64 {
        if zeta == 0.0 {
            return y;
        }
        match self {
            Self::ShiftedSquare => (y + zeta * (a - 0.5)) / (1.0 + zeta),
            Self::Logistic => {
                let mut v = y;
                for _ in 0..100 {
                    let g = v - y + zeta * self.d1(v, a);
                    let h = 1.0 + zeta * self.d2(v, a);
                    let step = g / h;
                    v -= step;
                    if step.abs() < 1e-13 {
                        break;
                    }
                }
                v
            }
        }
    }

    /// `loss'(prox[zeta loss(.;1)](y); 1) - loss'(prox[zeta loss(.;0)](y); 0)`,
    /// the score gap entering the shrinkage-factor expectation.
    pub fn score_gap(&self, zeta: f64, y: f64) -> f64 {
        self.d1(self.prox(zeta, 1.0, y), 1.0) - self.d1(self.prox(zeta, 0.0, y), 0.0)
    }
}

/// Weighting applied to the outcome loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    Unit,
    /// `w = 1 / pi(eta_prop)` with the true propensity.
    InversePropensity,
    /// `w = 1 / (pi(eta_prop) - omega)`; requires `omega < inf pi`.
    DofAdjustedInversePropensity {
        omega: f64,
    },
}

/// True propensity parameters, used only by the oracle weighting schemes.
#[derive(Debug, Clone)]
pub struct PropensityOracle {
    pub intercept: f64,
    pub coef: DVector<f64>,
    pub link: LinkFunction,
}

impl PropensityOracle {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        Self {
            intercept: spec.theta_prop0,
            coef: spec.theta_prop.clone(),
            link: spec.link.clone(),
        }
    }
}

/// A converged fit: intercept, coefficients, per-unit scores, and solver
/// diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub intercept: f64,
    pub coef: DVector<f64>,
    /// Outcome fits: `a .* w .* (y - eta_hat)`. Propensity fits:
    /// `d/d eta loss(eta_hat; a)`.
    pub residual_score: DVector<f64>,
    /// Weight-function values `w_i` (all ones except for oracle weighting).
    pub weights: DVector<f64>,
    pub objective_value: f64,
    /// Max-norm of the stationarity condition at the returned point.
    pub kkt_residual: f64,
}

impl FitResult {
    pub fn linear_predictor(&self, data: &Dataset) -> DVector<f64> {
        let mut eta = &data.x * &self.coef;
        eta.add_scalar_mut(self.intercept);
        eta
    }

    /// Plug-in G-computation mean `theta0 + <mean(x), theta>`.
    pub fn g_computation_mean(&self, data: &Dataset) -> f64 {
        self.intercept + data.mean_x().dot(&self.coef)
    }

    /// Intercept and coefficients as one CSV row, for debugging dumps.
    pub fn coef_csv_row(&self) -> String {
        let mut out = format!("{:.16e}", self.intercept);
        for v in self.coef.iter() {
            out.push_str(&format!(",{v:.16e}"));
        }
        out
    }
}

fn weights_for(
    data: &Dataset,
    scheme: WeightScheme,
    oracle: Option<&PropensityOracle>,
) -> Result<DVector<f64>> {
    match scheme {
        WeightScheme::Unit => Ok(DVector::from_element(data.n(), 1.0)),
        WeightScheme::InversePropensity | WeightScheme::DofAdjustedInversePropensity { .. } => {
            let orc = oracle.ok_or_else(|| {
                Error::Precondition(
                    "non-unit weight schemes require oracle propensity parameters".into(),
                )
            })?;
            let omega = match scheme {
                WeightScheme::DofAdjustedInversePropensity { omega } => {
                    let floor = orc.link.range().0;
                    if !(omega > 0.0 && omega < floor) {
                        return Err(Error::Precondition(format!(
                            "omega = {omega} must lie in (0, inf pi = {floor})"
                        )));
                    }
                    omega
                }
                _ => 0.0,
            };
            let eta = &data.x * &orc.coef;
            Ok(DVector::from_fn(data.n(), |i, _| {
                1.0 / (orc.link.eval(orc.intercept + eta[i]) - omega)
            }))
        }
    }
}

/// Core solver for intercept-plus-coefficients weighted least squares with an
/// optional ridge term, via weighted centering and a Cholesky solve of the
/// coefficient block.
struct RidgeCore {
    intercept: f64,
    coef: DVector<f64>,
}

fn solve_weighted_ridge(
    data: &Dataset,
    m: &DVector<f64>,
    lambda: f64,
    what: &'static str,
) -> Result<RidgeCore> {
    let n = data.n() as f64;
    let p = data.p();
    let active: Vec<usize> = (0..data.n()).filter(|&i| m[i] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::NoObservedUnits);
    }
    let sw: f64 = active.iter().map(|&i| m[i]).sum();
    let mut x_bar = DVector::zeros(p);
    let mut y_bar = 0.0;
    for &i in &active {
        x_bar += data.x.row(i).transpose() * m[i];
        y_bar += m[i] * data.y[i];
    }
    x_bar /= sw;
    y_bar /= sw;

    // B holds sqrt(m_i) (x_i - x_bar); the Gram of B is the curvature block.
    let mut b = DMatrix::zeros(active.len(), p);
    let mut z = DVector::zeros(active.len());
    for (r, &i) in active.iter().enumerate() {
        let s = m[i].sqrt();
        for j in 0..p {
            b[(r, j)] = s * (data.x[(i, j)] - x_bar[j]);
        }
        z[r] = s * (data.y[i] - y_bar);
    }
    let mut gram = b.tr_mul(&b) / n;
    for j in 0..p {
        gram[(j, j)] += lambda;
    }
    let rhs = b.tr_mul(&z) / n;
    let chol = Cholesky::new(gram.clone()).ok_or(Error::Singular { what })?;
    let mut coef = chol.solve(&rhs);
    // One pass of iterative refinement on the normal equations.
    let resid = &rhs - (&gram * &coef);
    coef += chol.solve(&resid);

    let intercept = y_bar - x_bar.dot(&coef);
    Ok(RidgeCore { intercept, coef })
}

fn outcome_fit_from_core(
    data: &Dataset,
    core: RidgeCore,
    w: DVector<f64>,
    lambda: f64,
) -> FitResult {
    let n = data.n() as f64;
    let eta = {
        let mut e = &data.x * &core.coef;
        e.add_scalar_mut(core.intercept);
        e
    };
    let score = DVector::from_fn(data.n(), |i, _| data.a[i] * w[i] * (data.y[i] - eta[i]));
    let grad_coef = &data.x.tr_mul(&score) / n - core.coef.clone() * lambda;
    let grad_int = score.sum() / n;
    let kkt = grad_coef.abs().max().max(grad_int.abs());
    let objective = score
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            // s = a w (y - eta); the loss term is a w (y - eta)^2 / 2.
            if data.a[i] == 1.0 {
                0.5 * s * (data.y[i] - eta[i])
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n
        + 0.5 * lambda * core.coef.norm_squared();
    FitResult {
        intercept: core.intercept,
        coef: core.coef,
        residual_score: score,
        weights: w,
        objective_value: objective,
        kkt_residual: kkt,
    }
}

/// Penalized weighted least squares for the outcome model.
pub fn fit_outcome(
    data: &Dataset,
    penalty: &Penalty,
    scheme: WeightScheme,
    oracle: Option<&PropensityOracle>,
) -> Result<FitResult> {
    let w = weights_for(data, scheme, oracle)?;
    let m = DVector::from_fn(data.n(), |i, _| data.a[i] * w[i]);
    let core = solve_weighted_ridge(data, &m, penalty.lambda(), "ridge normal equations")?;
    Ok(outcome_fit_from_core(data, core, w, penalty.lambda()))
}

/// Unpenalized least squares on the observed units; the baseline outcome fit.
pub fn fit_ols(data: &Dataset) -> Result<FitResult> {
    let n1 = data.n_observed();
    if n1 <= data.p() {
        return Err(Error::RankDeficient {
            needed: data.p() + 1,
            got: n1,
        });
    }
    let m = data.a.clone();
    let core = solve_weighted_ridge(data, &m, 0.0, "ols normal equations")?;
    let w = DVector::from_element(data.n(), 1.0);
    Ok(outcome_fit_from_core(data, core, w, 0.0))
}

struct MEstRequest<'a> {
    data: &'a Dataset,
    loss: PropensityLoss,
    lambda: f64,
    divergence_guard: bool,
}

/// Newton with step-halving on the propensity objective
/// `(1/2n) sum_i loss(eta_i; a_i) + (lambda/2)||v||^2`.
fn fit_m_estimator(req: MEstRequest) -> Result<FitResult> {
    let data = req.data;
    let loss = req.loss;
    let n = data.n() as f64;
    let p = data.p();

    let objective = |int: f64, coef: &DVector<f64>| -> f64 {
        let eta = &data.x * coef;
        let mut acc = 0.0;
        for i in 0..data.n() {
            acc += loss.value(int + eta[i], data.a[i]);
        }
        acc / (2.0 * n) + 0.5 * req.lambda * coef.norm_squared()
    };

    let mut intercept = 0.0;
    let mut coef = DVector::zeros(p);
    let mut obj = objective(intercept, &coef);
    let mut cached_chol: Option<Cholesky<f64, Dyn>> = None;
    let mut kkt = f64::INFINITY;

    for iter in 0..NEWTON_MAX_ITER {
        let eta = {
            let mut e = &data.x * &coef;
            e.add_scalar_mut(intercept);
            e
        };
        let score = DVector::from_fn(data.n(), |i, _| loss.d1(eta[i], data.a[i]));
        let grad_int = score.sum() / (2.0 * n);
        let grad_coef = data.x.tr_mul(&score) / (2.0 * n) + coef.clone() * req.lambda;
        kkt = grad_coef.abs().max().max(grad_int.abs());
        if kkt <= NEWTON_TOL {
            return Ok(FitResult {
                intercept,
                coef,
                residual_score: score,
                weights: DVector::from_element(data.n(), 1.0),
                objective_value: obj,
                kkt_residual: kkt,
            });
        }

        let reuse = loss.constant_curvature() && cached_chol.is_some();
        if !reuse {
            let curv = DVector::from_fn(data.n(), |i, _| loss.d2(eta[i], data.a[i]));
            let mut h = DMatrix::zeros(p + 1, p + 1);
            h[(0, 0)] = curv.sum() / (2.0 * n);
            let hx = data.x.tr_mul(&curv) / (2.0 * n);
            for j in 0..p {
                h[(0, j + 1)] = hx[j];
                h[(j + 1, 0)] = hx[j];
            }
            let mut xc = data.x.clone();
            for i in 0..data.n() {
                let s = curv[i].sqrt();
                for j in 0..p {
                    xc[(i, j)] *= s;
                }
            }
            let mut block = xc.tr_mul(&xc) / (2.0 * n);
            for j in 0..p {
                block[(j, j)] += req.lambda;
            }
            for j in 0..p {
                for k in 0..p {
                    h[(j + 1, k + 1)] = block[(j, k)];
                }
            }
            cached_chol = Some(Cholesky::new(h).ok_or(if req.divergence_guard {
                Error::Separation
            } else {
                Error::Singular {
                    what: "m-estimation Hessian",
                }
            })?);
        }
        let chol = cached_chol.as_ref().unwrap();

        let mut grad_full = DVector::zeros(p + 1);
        grad_full[0] = grad_int;
        for j in 0..p {
            grad_full[j + 1] = grad_coef[j];
        }
        let dir = chol.solve(&grad_full);

        // Step halving on the objective.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand_int = intercept - step * dir[0];
            let cand_coef = DVector::from_fn(p, |j, _| coef[j] - step * dir[j + 1]);
            let cand_obj = objective(cand_int, &cand_coef);
            if cand_obj <= obj + 1e-14 * obj.abs().max(1.0) {
                intercept = cand_int;
                coef = cand_coef;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                what: "m-estimation line search",
                iterations: iter,
                residual: kkt,
            });
        }
        if req.divergence_guard && coef.norm() > 1e4 {
            return Err(Error::Separation);
        }
    }
    Err(Error::NonConvergence {
        what: "m-estimation Newton",
        iterations: NEWTON_MAX_ITER,
        residual: kkt,
    })
}

/// Penalized M-estimator for the propensity model.
///
/// The loss sum carries the printed `1/(2n)` prefactor; relative to the
/// `1/n` convention this doubles the effective ridge strength, which the
/// degrees-of-freedom equations account for.
pub fn fit_propensity_m(
    data: &Dataset,
    penalty: &Penalty,
    loss: PropensityLoss,
) -> Result<FitResult> {
    fit_m_estimator(MEstRequest {
        data,
        loss,
        lambda: penalty.lambda(),
        divergence_guard: false,
    })
}

/// Unpenalized logistic regression of `a` on the features; the baseline
/// propensity fit. Errors out on separation instead of diverging.
pub fn fit_logistic_unpenalized(data: &Dataset) -> Result<FitResult> {
    fit_m_estimator(MEstRequest {
        data,
        loss: PropensityLoss::Logistic,
        lambda: 0.0,
        divergence_guard: true,
    })
}

/// Moment-method estimate of the propensity coefficients,
/// `mean(x | a = 1) - mean(x)`, together with the observed count.
pub fn fit_propensity_moment(data: &Dataset) -> Result<(DVector<f64>, usize)> {
    let n1 = data.n_observed();
    if n1 == 0 {
        return Err(Error::NoObservedUnits);
    }
    let coef = data.mean_x_observed()? - data.mean_x();
    Ok((coef, n1))
}
