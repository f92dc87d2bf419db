//! Debiasing constructions for the plug-in mean.
//!
//! Every construction corrects the penalized base fit with a score term
//! `s = X^T(a .* w .* resid) / (n zeta_theta)` and then differs in how the
//! feature moments enter:
//!
//! * naive: unconditional moments (provably biased under confounding),
//! * oracle ASCW: observation-conditional moments built from the true
//!   propensity parameters,
//! * empirical SCA: the Sherman-Morrison expansion of ASCW with estimated
//!   scalar adjustments and a debiased (not consistent) propensity direction,
//!   plus correlation corrections for reusing the same data.
//!
//! All operations here require identity feature covariance; callers whiten
//! first and map coefficient reports back through the stored transform. On
//! that scale the per-coordinate standard error is `tau_hat / sqrt(n)`.

use nalgebra::{DMatrix, DVector};

use crate::dof::DofAdjustments;
use crate::error::{Error, Result};
use crate::fits::FitResult;
use crate::model::{Dataset, ModelSpec};
use crate::summary::{ShrinkageFactor, SummaryStats};

/// Which debiasing produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DebiasMethod {
    Naive,
    NaiveIpwWeighted,
    OracleAscw,
    EmpiricalScaMoment,
    EmpiricalScaMest,
}

impl DebiasMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Naive => "debias-naive",
            Self::NaiveIpwWeighted => "debias-ipw",
            Self::OracleAscw => "oracle-ascw",
            Self::EmpiricalScaMoment => "sca-moment",
            Self::EmpiricalScaMest => "sca-mest",
        }
    }
}

/// Debiased coefficients and the plug-in mean they imply.
#[derive(Debug, Clone)]
pub struct DebiasReport {
    pub method: DebiasMethod,
    pub theta0_de: f64,
    pub theta_de: DVector<f64>,
    /// `theta0_de + <mean(x), theta_de>`, the G-computation plug-in.
    pub mu_out_de: f64,
    /// Effective noise level; the per-coordinate standard error is
    /// `tau_hat / sqrt(n)` on the whitened scale.
    pub tau_hat: f64,
}

impl DebiasReport {
    fn assemble(
        method: DebiasMethod,
        theta0_de: f64,
        theta_de: DVector<f64>,
        data: &Dataset,
        tau_hat: f64,
    ) -> Self {
        let mu_out_de = theta0_de + data.mean_x().dot(&theta_de);
        Self {
            method,
            theta0_de,
            theta_de,
            mu_out_de,
            tau_hat,
        }
    }
}

/// Which feature mean the naive correction subtracts.
#[derive(Debug, Clone)]
pub enum MeanEstimate {
    /// Known model mean.
    Oracle(DVector<f64>),
    /// Sample mean of the features.
    Sample,
}

fn require_white(data: &Dataset) -> Result<()> {
    if data.sigma.is_identity() {
        Ok(())
    } else {
        Err(Error::Precondition(
            "debiasing runs on the whitened scale; call model::whiten first".into(),
        ))
    }
}

/// `X^T residual_score / (n zeta_theta)`, the shared correction direction.
fn score_direction(fit: &FitResult, data: &Dataset, dof: &DofAdjustments) -> Result<DVector<f64>> {
    if dof.zeta_theta <= 1e-10 {
        return Err(Error::Precondition(format!(
            "zeta_theta = {} is too small for debiasing",
            dof.zeta_theta
        )));
    }
    Ok(data.x.tr_mul(&fit.residual_score) / (data.n() as f64 * dof.zeta_theta))
}

fn s_out_of(fit: &FitResult, data: &Dataset, dof: &DofAdjustments) -> f64 {
    (fit.residual_score.norm_squared() / data.n() as f64).sqrt() / dof.zeta_theta
}

/// Unmodified debiasing with unconditional feature moments. Inconsistent for
/// the population mean under confounded missingness; kept as a comparator and
/// as the shared computational kernel.
pub fn debias_naive(
    fit: &FitResult,
    data: &Dataset,
    dof: &DofAdjustments,
    mean: &MeanEstimate,
    method: DebiasMethod,
) -> Result<DebiasReport> {
    require_white(data)?;
    let s = score_direction(fit, data, dof)?;
    let m = match mean {
        MeanEstimate::Oracle(v) => v.clone(),
        MeanEstimate::Sample => data.mean_x(),
    };
    let theta0_de = fit.intercept - m.dot(&s);
    let theta_de = &fit.coef + &s;
    let tau = s_out_of(fit, data, dof);
    Ok(DebiasReport::assemble(
        method, theta0_de, theta_de, data, tau,
    ))
}

/// Mean and covariance of the features conditional on observation, plus the
/// rank-one inverse. On the whitened scale:
/// `mu_cfd = mu + alpha1 theta_prop`,
/// `sigma_cfd = I + (alpha2 - alpha1^2) theta_prop theta_prop^T`,
/// `sigma_cfd^{-1} = I - sc theta_prop theta_prop^T` with
/// `sc = (alpha2 - alpha1^2) / (1 + (alpha2 - alpha1^2)||theta_prop||^2)`.
#[derive(Debug, Clone)]
pub struct CfdMoments {
    pub mu_cfd: DVector<f64>,
    pub sigma_cfd: DMatrix<f64>,
    pub sigma_cfd_inv: DMatrix<f64>,
    pub sc_sigma: f64,
    /// Propensity direction in whitened coordinates, `Sigma^{1/2} theta_prop`.
    pub direction: DVector<f64>,
}

/// Computes the observation-conditional feature moments from true model
/// parameters and the link-moment ratios `(alpha1, alpha2)`.
pub fn conditional_moments(spec: &ModelSpec, alpha1: f64, alpha2: f64) -> Result<CfdMoments> {
    let p = spec.p;
    let excess = alpha2 - alpha1 * alpha1;
    let norm_sq = spec.sigma.norm_sq(&spec.theta_prop);
    let denom = 1.0 + excess * norm_sq;
    if denom <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "conditional covariance: 1 + (alpha2 - alpha1^2) ||theta||^2 = {denom}"
        )));
    }
    let sc_sigma = excess / denom;

    match &spec.sigma {
        crate::model::Covariance::Identity(_) => {
            let u = spec.theta_prop.clone();
            let mu_cfd = &spec.mu_x + &u * alpha1;
            let mut sigma_cfd = DMatrix::identity(p, p);
            let mut sigma_cfd_inv = DMatrix::identity(p, p);
            for i in 0..p {
                for j in 0..p {
                    sigma_cfd[(i, j)] += excess * u[i] * u[j];
                    sigma_cfd_inv[(i, j)] -= sc_sigma * u[i] * u[j];
                }
            }
            Ok(CfdMoments {
                mu_cfd,
                sigma_cfd,
                sigma_cfd_inv,
                sc_sigma,
                direction: u,
            })
        }
        crate::model::Covariance::Dense(sigma) => {
            let (half, _) = spec
                .sigma
                .symmetric_sqrt_pair()?
                .expect("dense covariance has factors");
            let direction = &half * &spec.theta_prop;
            let sigma_theta = sigma * &spec.theta_prop;
            let mu_cfd = &spec.mu_x + &sigma_theta * alpha1;
            let sigma_cfd = sigma + &sigma_theta * sigma_theta.transpose() * excess;
            let chol = sigma
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("feature covariance".into()))?;
            let sigma_inv = chol.inverse();
            let sigma_cfd_inv =
                &sigma_inv - &spec.theta_prop * spec.theta_prop.transpose() * sc_sigma;
            Ok(CfdMoments {
                mu_cfd,
                sigma_cfd,
                sigma_cfd_inv,
                sc_sigma,
                direction,
            })
        }
    }
}

/// Oracle augmented shifted-confounder weighting: the naive correction with
/// the conditional moments in place of the unconditional ones. Requires a
/// unit-weight fit. The standard error uses `tau = s_out`.
pub fn debias_oracle_ascw(
    fit: &FitResult,
    data: &Dataset,
    dof: &DofAdjustments,
    cfd: &CfdMoments,
) -> Result<DebiasReport> {
    require_white(data)?;
    if fit.weights.iter().any(|&w| w != 1.0) {
        return Err(Error::Precondition(
            "oracle ASCW requires the unit-weight outcome fit".into(),
        ));
    }
    let s = score_direction(fit, data, dof)?;
    let corrected = &cfd.sigma_cfd_inv * &s;
    let theta0_de = fit.intercept - cfd.mu_cfd.dot(&corrected);
    let theta_de = &fit.coef + &corrected;
    let tau = s_out_of(fit, data, dof);
    Ok(DebiasReport::assemble(
        DebiasMethod::OracleAscw,
        theta0_de,
        theta_de,
        data,
        tau,
    ))
}

/// Per-unit influence vectors entering the scalar adjustments.
#[derive(Debug, Clone)]
pub struct InfluenceVectors {
    /// `a .* w .* (y - eta_hat) / zeta_theta_out`; zero wherever `a_i = 0`.
    pub i_out: DVector<f64>,
    /// Moment route: `a / pi_hat - 1`. M-estimation route:
    /// `-score(eta_hat_prop; a) / zeta_theta_prop`.
    pub i_circ: DVector<f64>,
    /// `a / pi_hat`.
    pub i_x_cfd: DVector<f64>,
}

/// How the debiased propensity direction is built.
#[derive(Debug, Clone, Copy)]
pub enum PropensityRoute<'a> {
    Moment,
    MEstimation {
        fit: &'a FitResult,
        dof: &'a DofAdjustments,
    },
}

/// Assembles the influence vectors for a unit-weight outcome fit and the
/// chosen propensity route.
pub fn influence_vectors(
    out_fit: &FitResult,
    data: &Dataset,
    out_dof: &DofAdjustments,
    route: PropensityRoute<'_>,
) -> Result<InfluenceVectors> {
    let n1 = data.n_observed();
    if n1 == 0 {
        return Err(Error::NoObservedUnits);
    }
    let pi_hat = n1 as f64 / data.n() as f64;
    let i_out = &out_fit.residual_score / out_dof.zeta_theta;
    let i_x_cfd = &data.a / pi_hat;
    let i_circ = match route {
        PropensityRoute::Moment => i_x_cfd.clone().add_scalar(-1.0),
        PropensityRoute::MEstimation { fit, dof } => {
            if dof.zeta_theta <= 1e-10 {
                return Err(Error::Precondition(
                    "propensity zeta_theta too small for the influence vector".into(),
                ));
            }
            -(&fit.residual_score) / dof.zeta_theta
        }
    };
    Ok(InfluenceVectors {
        i_out,
        i_circ,
        i_x_cfd,
    })
}

/// Debiased (but not consistent) propensity direction on the whitened scale.
pub fn debias_propensity(
    data: &Dataset,
    beta: &ShrinkageFactor,
    route: PropensityRoute<'_>,
) -> Result<DVector<f64>> {
    require_white(data)?;
    if beta.is_degenerate() {
        return Err(Error::DegenerateShrinkage {
            beta: beta.beta_hat,
        });
    }
    match route {
        PropensityRoute::Moment => {
            let (diff, _) = crate::fits::fit_propensity_moment(data)?;
            Ok(diff / beta.beta_hat)
        }
        PropensityRoute::MEstimation { fit, dof } => {
            // The leave-one-out estimate theta - X^T score / (n zeta_theta),
            // rescaled by the shrinkage factor it concentrates around.
            let n = data.n() as f64;
            if dof.zeta_theta <= 1e-10 {
                return Err(Error::Precondition(
                    "propensity zeta_theta too small for debiasing".into(),
                ));
            }
            let correction = data.x.tr_mul(&fit.residual_score) / (n * dof.zeta_theta);
            Ok((&fit.coef - correction) / beta.beta_hat)
        }
    }
}

/// Scalar adjustments and influence cross-moments.
#[derive(Debug, Clone, Copy)]
pub struct DebiasAdjustments {
    pub dbadj01: f64,
    pub dbadj02: f64,
    pub dbadj1: f64,
    pub s_out: f64,
    pub s_outcirc: f64,
    pub s_circ: f64,
    pub s_xcirc: f64,
    pub beta_hat: f64,
}

/// Population-quantity version of the adjustments (true propensity direction
/// and spike, no correlation corrections). Together with the true direction
/// this reproduces oracle ASCW through the Sherman-Morrison expansion.
pub fn oracle_dbadj(
    fit: &FitResult,
    data: &Dataset,
    dof: &DofAdjustments,
    cfd: &CfdMoments,
) -> Result<DebiasAdjustments> {
    require_white(data)?;
    let s = score_direction(fit, data, dof)?;
    let u = &cfd.direction;
    let align = u.dot(&s);
    Ok(DebiasAdjustments {
        dbadj01: cfd.mu_cfd.dot(&s),
        dbadj02: -cfd.sc_sigma * cfd.mu_cfd.dot(u) * align,
        dbadj1: cfd.sc_sigma * align,
        s_out: s_out_of(fit, data, dof),
        s_outcirc: 0.0,
        s_circ: 0.0,
        s_xcirc: 0.0,
        beta_hat: 1.0,
    })
}

/// Empirical adjustments with correlation corrections.
///
/// The cross moments divide out the shrinkage factor wherever `i_circ`
/// enters: `s_outcirc = <i_out, i_circ> / (n beta)`,
/// `s_circ^2 = ||i_circ||^2 / (n beta^2)`,
/// `s_xcirc = <i_x_cfd, i_circ> / (n beta)`.
pub fn compute_dbadj(
    fit: &FitResult,
    data: &Dataset,
    dof: &DofAdjustments,
    stats: &SummaryStats,
    theta_prop_de: &DVector<f64>,
    infl: &InfluenceVectors,
    beta: &ShrinkageFactor,
) -> Result<DebiasAdjustments> {
    require_white(data)?;
    if beta.is_degenerate() {
        return Err(Error::DegenerateShrinkage {
            beta: beta.beta_hat,
        });
    }
    let n = data.n() as f64;
    let p = data.p() as f64;
    let b = beta.beta_hat;

    let s = score_direction(fit, data, dof)?;
    let s_out = (infl.i_out.norm_squared() / n).sqrt();
    let s_outcirc = infl.i_out.dot(&infl.i_circ) / (n * b);
    let s_circ = (infl.i_circ.norm_squared() / (n * b * b)).sqrt();
    let s_xcirc = infl.i_x_cfd.dot(&infl.i_circ) / (n * b);

    let mu_cfd_hat = data.mean_x_observed()?;
    let align = theta_prop_de.dot(&s) - s_outcirc * (p - n * dof.zeta_eta * dof.zeta_theta) / n;
    let overlap = mu_cfd_hat.dot(theta_prop_de) - s_xcirc * p / n;

    Ok(DebiasAdjustments {
        dbadj01: mu_cfd_hat.dot(&s),
        dbadj02: -stats.sc_sigma_hat * overlap * align,
        dbadj1: stats.sc_sigma_hat * align,
        s_out,
        s_outcirc,
        s_circ,
        s_xcirc,
        beta_hat: b,
    })
}

/// Empirical shifted-confounder augmentation: applies the adjustment scalars
/// and the debiased propensity direction to the base fit. The effective noise
/// is `tau^2 = s_out^2 - 2 dbadj1 s_outcirc + dbadj1^2 s_circ^2`.
pub fn debias_empirical_sca(
    fit: &FitResult,
    data: &Dataset,
    dof: &DofAdjustments,
    adj: &DebiasAdjustments,
    theta_prop_de: &DVector<f64>,
    method: DebiasMethod,
) -> Result<DebiasReport> {
    require_white(data)?;
    let s = score_direction(fit, data, dof)?;
    let theta0_de = fit.intercept - (adj.dbadj01 + adj.dbadj02);
    let theta_de = &fit.coef + &s - theta_prop_de * adj.dbadj1;
    let tau_sq = adj.s_out * adj.s_out - 2.0 * adj.dbadj1 * adj.s_outcirc
        + adj.dbadj1 * adj.dbadj1 * adj.s_circ * adj.s_circ;
    if tau_sq < 0.0 {
        return Err(Error::NegativeTauSquared { value: tau_sq });
    }
    Ok(DebiasReport::assemble(
        method,
        theta0_de,
        theta_de,
        data,
        tau_sq.sqrt(),
    ))
}

/// Empirical distribution of the per-coordinate z-scores against the truth.
#[derive(Debug, Clone)]
pub struct Coverage {
    /// `(t, fraction of coordinates with z <= t)` for each requested `t`.
    pub ecdf: Vec<(f64, f64)>,
    /// Fraction of coordinates with `|z| <= 1.96`.
    pub coverage95: f64,
}

/// Coordinate z-scores `sqrt(n) (theta_de_j - theta_j) / tau_hat` and their
/// empirical CDF over the requested grid.
pub fn coverage_stats(
    report: &DebiasReport,
    theta_true: &DVector<f64>,
    n: usize,
    t_grid: &[f64],
) -> Coverage {
    let p = report.theta_de.len();
    let scale = (n as f64).sqrt() / report.tau_hat;
    let z: Vec<f64> = (0..p)
        .map(|j| scale * (report.theta_de[j] - theta_true[j]))
        .collect();
    let frac =
        |pred: &dyn Fn(f64) -> bool| z.iter().filter(|&&v| pred(v)).count() as f64 / p as f64;
    let ecdf = t_grid.iter().map(|&t| (t, frac(&|v| v <= t))).collect();
    let coverage95 = frac(&|v| v.abs() <= 1.96);
    Coverage { ecdf, coverage95 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dof::dof_for_outcome;
    use crate::fits::{fit_outcome, Penalty, WeightScheme};
    use crate::link::LinkFunction;
    use crate::model::{generate, Covariance};
    use crate::summary::{alphas_and_spike, ShrinkageMethod};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn offset_link() -> LinkFunction {
        LinkFunction::offset_logistic(0.1).unwrap()
    }

    fn fig_spec(p: usize, noise: f64) -> ModelSpec {
        let mut e1 = DVector::zeros(p);
        e1[0] = 1.0;
        ModelSpec::new(
            0.0,
            e1.clone(),
            0.0,
            e1,
            DVector::zeros(p),
            Covariance::Identity(p),
            noise,
            offset_link(),
        )
        .unwrap()
    }

    fn unit_fit(data: &Dataset, lambda: f64) -> (FitResult, DofAdjustments) {
        let pen = Penalty::ridge(lambda).unwrap();
        let fit = fit_outcome(data, &pen, WeightScheme::Unit, None).unwrap();
        let dof = dof_for_outcome(&fit, data, &pen).unwrap();
        (fit, dof)
    }

    #[test]
    fn zero_residuals_mean_no_correction() {
        let spec = fig_spec(5, 0.0);
        let mut data = generate(&spec, 80, 2).unwrap();
        data.a = DVector::from_element(80, 1.0);
        let (fit, dof) = unit_fit(&data, 1e-10);
        let rep = debias_naive(
            &fit,
            &data,
            &dof,
            &MeanEstimate::Sample,
            DebiasMethod::Naive,
        )
        .unwrap();
        assert!((&rep.theta_de - &fit.coef).abs().max() < 1e-8);
        assert!((rep.theta0_de - fit.intercept).abs() < 1e-8);
    }

    #[test]
    fn kkt_shortcut_identity() {
        // On the whitened scale the ridge KKT conditions give
        // s = lambda theta_hat / zeta_theta, so the naive debias is a pure
        // rescaling of the coefficients.
        let spec = fig_spec(60, 0.3);
        let data = generate(&spec, 50, 4).unwrap();
        let lambda = 0.8;
        let (fit, dof) = unit_fit(&data, lambda);
        let s = score_direction(&fit, &data, &dof).unwrap();
        let shortcut = &fit.coef * (lambda / dof.zeta_theta);
        assert!((&s - &shortcut).abs().max() < 1e-10);
        let rep = debias_naive(
            &fit,
            &data,
            &dof,
            &MeanEstimate::Sample,
            DebiasMethod::Naive,
        )
        .unwrap();
        let rescaled = &fit.coef * (1.0 + lambda / dof.zeta_theta);
        assert!((&rep.theta_de - rescaled).abs().max() < 1e-10);
    }

    #[test]
    fn conditional_moments_null_propensity() {
        let mut spec = fig_spec(6, 0.2);
        spec.theta_prop = DVector::zeros(6);
        let cfd = conditional_moments(&spec, 0.4, 0.1).unwrap();
        assert!((cfd.mu_cfd.clone() - spec.mu_x).abs().max() < 1e-15);
        assert!(
            (cfd.sigma_cfd.clone() - DMatrix::identity(6, 6))
                .abs()
                .max()
                < 1e-15
        );
        assert!(
            (cfd.sigma_cfd_inv.clone() - DMatrix::identity(6, 6))
                .abs()
                .max()
                < 1e-15
        );
    }

    #[test]
    fn sherman_morrison_inverse_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..10 {
            let p = 6;
            let b = DMatrix::from_fn(p, p, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g
            });
            let sigma = &b * b.transpose() + DMatrix::identity(p, p);
            let spec = ModelSpec::new(
                0.0,
                DVector::zeros(p),
                0.1,
                DVector::from_fn(p, |i, _| 0.3 * (i as f64 + 1.0) / p as f64),
                DVector::from_element(p, 0.2),
                if trial % 2 == 0 {
                    Covariance::Dense(sigma)
                } else {
                    Covariance::Identity(p)
                },
                0.5,
                offset_link(),
            )
            .unwrap();
            let alpha1 = rng.random_range(0.1..0.5);
            let alpha2 = rng.random_range(-0.2..0.2);
            let cfd = conditional_moments(&spec, alpha1, alpha2).unwrap();
            let prod = &cfd.sigma_cfd * &cfd.sigma_cfd_inv;
            assert!(
                (prod - DMatrix::identity(p, p)).abs().max() < 1e-10,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn conditional_mean_matches_monte_carlo() {
        let p = 4;
        let spec = fig_spec(p, 0.2);
        let link = offset_link();
        let (alpha1, alpha2, _) = alphas_and_spike(0.0, 1.0, &link);
        let cfd = conditional_moments(&spec, alpha1, alpha2).unwrap();
        let n = 1_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut sums = vec![0.0; p];
        let mut sums_sq = vec![0.0; p];
        let mut count = 0usize;
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let u: f64 = rng.random();
            if u < link.eval(x[0]) {
                count += 1;
                for j in 0..p {
                    sums[j] += x[j];
                    sums_sq[j] += x[j] * x[j];
                }
            }
        }
        for j in 0..p {
            let mean = sums[j] / count as f64;
            let var = sums_sq[j] / count as f64 - mean * mean;
            let se = (var / count as f64).sqrt();
            assert!(
                (mean - cfd.mu_cfd[j]).abs() <= 3.0 * se,
                "coordinate {j}: {mean} vs {}",
                cfd.mu_cfd[j]
            );
        }
    }

    #[test]
    fn ascw_collapses_to_naive_without_confounding() {
        let mut spec = fig_spec(8, 0.2);
        spec.theta_prop = DVector::zeros(8);
        let data = generate(&spec, 60, 6).unwrap();
        let (fit, dof) = unit_fit(&data, 1.0);
        let cfd = conditional_moments(&spec, 0.37, 0.0).unwrap();
        let ascw = debias_oracle_ascw(&fit, &data, &dof, &cfd).unwrap();
        let naive = debias_naive(
            &fit,
            &data,
            &dof,
            &MeanEstimate::Oracle(spec.mu_x.clone()),
            DebiasMethod::Naive,
        )
        .unwrap();
        assert!((&ascw.theta_de - &naive.theta_de).abs().max() < 1e-12);
        assert!((ascw.theta0_de - naive.theta0_de).abs() < 1e-12);
    }

    #[test]
    fn matrix_and_expanded_forms_agree() {
        // Sherman-Morrison algebra: the rank-one expansion with exact
        // population quantities reproduces the matrix-form oracle ASCW.
        let spec = fig_spec(50, 0.2);
        let link = offset_link();
        let (alpha1, alpha2, _) = alphas_and_spike(0.0, 1.0, &link);
        let cfd = conditional_moments(&spec, alpha1, alpha2).unwrap();
        for seed in 0..5 {
            let data = generate(&spec, 40, seed).unwrap();
            let (fit, dof) = unit_fit(&data, 1.0);
            let matrix_form = debias_oracle_ascw(&fit, &data, &dof, &cfd).unwrap();
            let adj = oracle_dbadj(&fit, &data, &dof, &cfd).unwrap();
            let expanded = debias_empirical_sca(
                &fit,
                &data,
                &dof,
                &adj,
                &cfd.direction,
                DebiasMethod::OracleAscw,
            )
            .unwrap();
            assert!(
                (&matrix_form.theta_de - &expanded.theta_de).abs().max() < 1e-10,
                "seed {seed}"
            );
            assert!((matrix_form.theta0_de - expanded.theta0_de).abs() < 1e-10);
            assert!((matrix_form.mu_out_de - expanded.mu_out_de).abs() < 1e-10);
        }
    }

    #[test]
    fn moment_route_is_moment_fit_over_beta() {
        let spec = fig_spec(10, 0.2);
        let data = generate(&spec, 120, 9).unwrap();
        let beta = ShrinkageFactor {
            beta_hat: 0.4,
            method: ShrinkageMethod::Moment,
        };
        let de = debias_propensity(&data, &beta, PropensityRoute::Moment).unwrap();
        let (diff, _) = crate::fits::fit_propensity_moment(&data).unwrap();
        assert!((de - diff / 0.4).abs().max() < 1e-14);

        let degenerate = ShrinkageFactor {
            beta_hat: 0.0,
            method: ShrinkageMethod::Moment,
        };
        assert!(matches!(
            debias_propensity(&data, &degenerate, PropensityRoute::Moment),
            Err(Error::DegenerateShrinkage { .. })
        ));
    }

    #[test]
    fn mest_route_recovers_direction() {
        // Large shrinkage limit: theta_hat -> 0, the score correction alone
        // carries the signal, and after dividing by beta_hat the direction
        // aligns with theta_prop.
        use crate::dof::dof_for_propensity;
        use crate::fits::{fit_propensity_m, PropensityLoss};
        use crate::summary::{shrinkage_mestimation, summarize};
        let p = 4;
        let spec = fig_spec(p, 0.2);
        let n = 20_000;
        let data = generate(&spec, n, 77).unwrap();
        let loss = PropensityLoss::ShiftedSquare;
        let stats = summarize(&data, &offset_link()).unwrap();
        for lambda in [1.0, 1e8] {
            let pen = Penalty::ridge(lambda).unwrap();
            let prop_fit = fit_propensity_m(&data, &pen, loss).unwrap();
            let prop_dof = dof_for_propensity(&prop_fit, &data, &pen, loss).unwrap();
            let beta =
                shrinkage_mestimation(&data, &prop_fit, &prop_dof, &stats, loss, &offset_link())
                    .unwrap();
            let route = PropensityRoute::MEstimation {
                fit: &prop_fit,
                dof: &prop_dof,
            };
            let de = debias_propensity(&data, &beta, route).unwrap();
            assert!(de.iter().all(|v| v.is_finite()));
            let align = de.dot(&spec.theta_prop) / spec.theta_prop.norm_squared();
            assert!(
                (align - 1.0).abs() < 0.1,
                "lambda {lambda}: alignment {align}"
            );
        }
    }

    #[test]
    fn dbadj_zero_cases() {
        let spec = fig_spec(6, 0.0);
        let data = generate(&spec, 90, 14).unwrap();
        // Interpolating fit on the observed units: residual scores vanish.
        let (fit, dof) = unit_fit(&data, 1e-8);
        assert!(fit.residual_score.abs().max() < 1e-6);
        let stats = crate::summary::summarize(&data, &offset_link()).unwrap();
        let beta = crate::summary::shrinkage_moment(&stats);
        let infl = influence_vectors(&fit, &data, &dof, PropensityRoute::Moment).unwrap();
        let theta_de = debias_propensity(&data, &beta, PropensityRoute::Moment).unwrap();
        let adj = compute_dbadj(&fit, &data, &dof, &stats, &theta_de, &infl, &beta).unwrap();
        assert!(adj.dbadj01.abs() < 1e-6);
        assert!(adj.s_outcirc.abs() < 1e-8);

        // sc = 0 kills dbadj02 and dbadj1 regardless of the rest.
        let mut stats2 = stats;
        stats2.sc_sigma_hat = 0.0;
        let adj2 = compute_dbadj(&fit, &data, &dof, &stats2, &theta_de, &infl, &beta).unwrap();
        assert_eq!(adj2.dbadj02, 0.0);
        assert_eq!(adj2.dbadj1, 0.0);
    }

    #[test]
    fn sca_pipeline_masking_audit() {
        // Flipping unobserved outcomes must not change any debias output.
        let spec = fig_spec(30, 0.2);
        let data = generate(&spec, 60, 21).unwrap();
        let mut corrupted = data.clone();
        for i in 0..corrupted.n() {
            if corrupted.a[i] == 0.0 {
                corrupted.y[i] = -corrupted.y[i] + 3.5;
            }
        }
        let run = |d: &Dataset| {
            let (fit, dof) = unit_fit(d, 1.0);
            let stats = crate::summary::summarize(d, &offset_link()).unwrap();
            let beta = crate::summary::shrinkage_moment(&stats);
            let theta_de = debias_propensity(d, &beta, PropensityRoute::Moment).unwrap();
            let infl = influence_vectors(&fit, d, &dof, PropensityRoute::Moment).unwrap();
            let adj = compute_dbadj(&fit, d, &dof, &stats, &theta_de, &infl, &beta).unwrap();
            debias_empirical_sca(
                &fit,
                d,
                &dof,
                &adj,
                &theta_de,
                DebiasMethod::EmpiricalScaMoment,
            )
            .unwrap()
        };
        let r1 = run(&data);
        let r2 = run(&corrupted);
        assert_eq!(r1.mu_out_de, r2.mu_out_de);
        assert_eq!(r1.theta0_de, r2.theta0_de);
        assert_eq!(r1.theta_de, r2.theta_de);
        assert_eq!(r1.tau_hat, r2.tau_hat);
    }

    #[test]
    fn report_invariant_holds() {
        let spec = fig_spec(25, 0.2);
        let data = generate(&spec, 40, 8).unwrap();
        let (fit, dof) = unit_fit(&data, 1.0);
        let rep = debias_naive(
            &fit,
            &data,
            &dof,
            &MeanEstimate::Sample,
            DebiasMethod::Naive,
        )
        .unwrap();
        let recomputed = rep.theta0_de + data.mean_x().dot(&rep.theta_de);
        assert!((rep.mu_out_de - recomputed).abs() < 1e-12);
    }

    #[test]
    fn coverage_of_synthetic_normal_scores() {
        let p = 20_000;
        let n = 400;
        let tau = 1.3;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let theta_true = DVector::zeros(p);
        let theta_de = DVector::from_fn(p, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            tau * g / (n as f64).sqrt()
        });
        let report = DebiasReport {
            method: DebiasMethod::EmpiricalScaMoment,
            theta0_de: 0.0,
            mu_out_de: 0.0,
            theta_de,
            tau_hat: tau,
        };
        let cov = coverage_stats(&report, &theta_true, n, &[0.0, 1.645]);
        let half_ci = 3.0 * 0.5 / (p as f64).sqrt();
        assert!((cov.ecdf[0].1 - 0.5).abs() < half_ci);
        assert!((cov.ecdf[1].1 - 0.95).abs() < 0.01);
        assert!((cov.coverage95 - 0.95).abs() < 0.01);
    }

    #[test]
    fn debias_requires_whitened_data() {
        let p = 3;
        let sigma = DMatrix::from_row_slice(p, p, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.0, 0.0, 0.0, 1.5]);
        let spec = ModelSpec::new(
            0.0,
            DVector::zeros(p),
            0.0,
            DVector::zeros(p),
            DVector::zeros(p),
            Covariance::Dense(sigma),
            0.5,
            offset_link(),
        )
        .unwrap();
        let data = generate(&spec, 30, 3).unwrap();
        let pen = Penalty::ridge(1.0).unwrap();
        let fit = fit_outcome(&data, &pen, WeightScheme::Unit, None).unwrap();
        let dof = dof_for_outcome(&fit, &data, &pen).unwrap();
        assert!(matches!(
            debias_naive(
                &fit,
                &data,
                &dof,
                &MeanEstimate::Sample,
                DebiasMethod::Naive
            ),
            Err(Error::Precondition(_))
        ));
    }
}
