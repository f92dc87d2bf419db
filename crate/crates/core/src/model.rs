//! Generative model, synthetic data, and the whitening reduction.
//!
//! The model is a linear outcome with Gaussian noise next to a binary
//! missingness indicator drawn through a known link:
//!
//! ```text
//! y_i = theta_out0 + <x_i, theta_out> + eps_i,      eps_i ~ N(0, sigma^2)
//! P(a_i = 1 | x_i) = link(theta_prop0 + <x_i, theta_prop>)
//! x_i ~ N(mu_x, Sigma)
//! ```
//!
//! `y_i` exists for every unit, but estimators may only touch `a_i * y_i`;
//! the harness enforces this with a masking audit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::link::LinkFunction;

/// Feature covariance carried with a model or data set.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Identity(usize),
    Dense(DMatrix<f64>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Self::Identity(p) => *p,
            Self::Dense(m) => m.nrows(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity(_))
    }

    /// Lower Cholesky factor, `None` for the identity.
    pub fn cholesky_factor(&self) -> Result<Option<DMatrix<f64>>> {
        match self {
            Self::Identity(_) => Ok(None),
            Self::Dense(m) => {
                let chol = m
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("feature covariance".into()))?;
                Ok(Some(chol.l()))
            }
        }
    }

    /// Symmetric square root and inverse square root, `None` for the identity.
    pub fn symmetric_sqrt_pair(&self) -> Result<Option<(DMatrix<f64>, DMatrix<f64>)>> {
        match self {
            Self::Identity(_) => Ok(None),
            Self::Dense(m) => {
                let eigen = m.clone().symmetric_eigen();
                if eigen.eigenvalues.iter().any(|&l| l <= 0.0) {
                    return Err(Error::NotPositiveDefinite("feature covariance".into()));
                }
                let q = &eigen.eigenvectors;
                let half =
                    q * DMatrix::from_diagonal(&eigen.eigenvalues.map(f64::sqrt)) * q.transpose();
                let inv_half = q
                    * DMatrix::from_diagonal(&eigen.eigenvalues.map(|l| 1.0 / l.sqrt()))
                    * q.transpose();
                Ok(Some((half, inv_half)))
            }
        }
    }

    pub fn norm_sq(&self, v: &DVector<f64>) -> f64 {
        match self {
            Self::Identity(_) => v.norm_squared(),
            Self::Dense(m) => v.dot(&(m * v)),
        }
    }
}

/// Full generative model specification.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub p: usize,
    pub theta_out0: f64,
    pub theta_out: DVector<f64>,
    pub theta_prop0: f64,
    pub theta_prop: DVector<f64>,
    pub mu_x: DVector<f64>,
    pub sigma: Covariance,
    pub noise_sd: f64,
    pub link: LinkFunction,
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        theta_out0: f64,
        theta_out: DVector<f64>,
        theta_prop0: f64,
        theta_prop: DVector<f64>,
        mu_x: DVector<f64>,
        sigma: Covariance,
        noise_sd: f64,
        link: LinkFunction,
    ) -> Result<Self> {
        let p = theta_out.len();
        if theta_prop.len() != p || mu_x.len() != p || sigma.dim() != p {
            return Err(Error::InvalidConfig(format!(
                "dimension mismatch: theta_out {}, theta_prop {}, mu_x {}, sigma {}",
                p,
                theta_prop.len(),
                mu_x.len(),
                sigma.dim()
            )));
        }
        if noise_sd < 0.0 {
            return Err(Error::InvalidConfig("noise_sd must be >= 0".into()));
        }
        // SPD check at construction.
        sigma.cholesky_factor()?;
        Ok(Self {
            p,
            theta_out0,
            theta_out,
            theta_prop0,
            theta_prop,
            mu_x,
            sigma,
            noise_sd,
            link,
        })
    }

    /// Population mean outcome `E[y]`.
    pub fn mu_out(&self) -> f64 {
        self.theta_out0 + self.mu_x.dot(&self.theta_out)
    }

    /// Mean of the propensity linear predictor.
    pub fn mu_prop(&self) -> f64 {
        self.theta_prop0 + self.mu_x.dot(&self.theta_prop)
    }

    /// Standard deviation of the propensity linear predictor,
    /// `||theta_prop||_Sigma`.
    pub fn gamma_prop(&self) -> f64 {
        self.sigma.norm_sq(&self.theta_prop).sqrt()
    }
}

/// Realized data: features, outcomes, missingness indicators, and the known
/// covariance they were drawn from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub a: DVector<f64>,
    pub sigma: Covariance,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        a: DVector<f64>,
        sigma: Covariance,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidConfig("empty data set".into()));
        }
        if y.len() != n || a.len() != n || sigma.dim() != x.ncols() {
            return Err(Error::InvalidConfig("data dimension mismatch".into()));
        }
        if a.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidConfig("a_i must be 0 or 1".into()));
        }
        Ok(Self { x, y, a, sigma })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of observed outcomes, `n_1 = sum a_i`.
    pub fn n_observed(&self) -> usize {
        self.a.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.a[i] == 1.0).collect()
    }

    /// Sample feature mean.
    pub fn mean_x(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.p());
        for i in 0..self.n() {
            m += self.x.row(i).transpose();
        }
        m / self.n() as f64
    }

    /// Feature mean over observed units.
    pub fn mean_x_observed(&self) -> Result<DVector<f64>> {
        let n1 = self.n_observed();
        if n1 == 0 {
            return Err(Error::NoObservedUnits);
        }
        let mut m = DVector::zeros(self.p());
        for i in 0..self.n() {
            if self.a[i] == 1.0 {
                m += self.x.row(i).transpose();
            }
        }
        Ok(m / n1 as f64)
    }

    /// Copy with unobserved outcomes zeroed; estimators must be invariant to
    /// this replacement (masking audit).
    pub fn masked(&self) -> Dataset {
        let y = DVector::from_fn(self.n(), |i, _| self.y[i] * self.a[i]);
        Dataset {
            x: self.x.clone(),
            y,
            a: self.a.clone(),
            sigma: self.sigma.clone(),
        }
    }

    /// Row subset (keeps the covariance).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        let y = DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]);
        let a = DVector::from_fn(rows.len(), |i, _| self.a[rows[i]]);
        Dataset {
            x,
            y,
            a,
            sigma: self.sigma.clone(),
        }
    }
}

/// Outcome mechanism used by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    /// `y = theta_out0 + <x, theta_out> + eps`.
    Linear,
    /// `y = <x, theta_out> + (<x, theta_out>^2 - 1) + eps`; a quadratic term
    /// the linear outcome fit cannot capture.
    QuadraticMisspecified,
}

/// Population mean outcome under the given mechanism.
pub fn mu_out_for(spec: &ModelSpec, kind: OutcomeKind) -> f64 {
    match kind {
        OutcomeKind::Linear => spec.mu_out(),
        OutcomeKind::QuadraticMisspecified => {
            let m = spec.mu_x.dot(&spec.theta_out);
            let v = spec.sigma.norm_sq(&spec.theta_out);
            m + (v + m * m - 1.0)
        }
    }
}

/// Draws `n` iid units from the model. Deterministic for a fixed seed: the
/// draw order is X row by row, then the noise vector, then the missingness
/// uniforms.
pub fn generate(spec: &ModelSpec, n: usize, seed: u64) -> Result<Dataset> {
    generate_with(spec, n, seed, OutcomeKind::Linear)
}

/// As [`generate`] with an explicit outcome mechanism. The feature and
/// missingness draws are identical across mechanisms for the same seed.
pub fn generate_with(spec: &ModelSpec, n: usize, seed: u64, kind: OutcomeKind) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    let p = spec.p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chol = spec.sigma.cholesky_factor()?;

    let mut x = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(p);
    for i in 0..n {
        for j in 0..p {
            z[j] = StandardNormal.sample(&mut rng);
        }
        match &chol {
            None => {
                for j in 0..p {
                    x[(i, j)] = spec.mu_x[j] + z[j];
                }
            }
            Some(l) => {
                let row = &spec.mu_x + l * &z;
                for j in 0..p {
                    x[(i, j)] = row[j];
                }
            }
        }
    }

    let eps = DVector::from_fn(n, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        spec.noise_sd * g
    });

    let eta_out = &x * &spec.theta_out;
    let y = match kind {
        OutcomeKind::Linear => DVector::from_fn(n, |i, _| spec.theta_out0 + eta_out[i] + eps[i]),
        OutcomeKind::QuadraticMisspecified => DVector::from_fn(n, |i, _| {
            eta_out[i] + (eta_out[i] * eta_out[i] - 1.0) + eps[i]
        }),
    };

    let eta_prop = &x * &spec.theta_prop;
    let a = DVector::from_fn(n, |i, _| {
        let u: f64 = rng.random();
        if u < spec.link.eval(spec.theta_prop0 + eta_prop[i]) {
            1.0
        } else {
            0.0
        }
    });

    Dataset::new(x, y, a, spec.sigma.clone())
}

/// Invertible change of coordinates taking the feature covariance to the
/// identity: `X' = X Sigma^{-1/2}`, `theta' = Sigma^{1/2} theta`. Linear
/// predictors are untouched, so fits on the whitened data describe the same
/// model.
#[derive(Debug, Clone)]
pub struct Whitening {
    /// `Sigma^{1/2}` and `Sigma^{-1/2}`; `None` when the input was already
    /// white.
    factors: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl Whitening {
    pub fn is_identity(&self) -> bool {
        self.factors.is_none()
    }

    /// Maps an original-scale coefficient vector to the whitened scale.
    pub fn whiten_coef(&self, theta: &DVector<f64>) -> DVector<f64> {
        match &self.factors {
            None => theta.clone(),
            Some((half, _)) => half * theta,
        }
    }

    /// Maps a whitened-scale coefficient vector back to original coordinates.
    pub fn unwhiten_coef(&self, theta: &DVector<f64>) -> DVector<f64> {
        match &self.factors {
            None => theta.clone(),
            Some((_, inv_half)) => inv_half * theta,
        }
    }

    /// Undoes the feature transform, `X = X' Sigma^{1/2}`.
    pub fn unwhiten_features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factors {
            None => x.clone(),
            Some((half, _)) => x * half,
        }
    }
}

/// Rotates a data set to identity feature covariance.
pub fn whiten(data: &Dataset) -> Result<(Dataset, Whitening)> {
    match data.sigma.symmetric_sqrt_pair()? {
        None => Ok((data.clone(), Whitening { factors: None })),
        Some((half, inv_half)) => {
            let x = &data.x * &inv_half;
            let out = Dataset {
                x,
                y: data.y.clone(),
                a: data.a.clone(),
                sigma: Covariance::Identity(data.p()),
            };
            Ok((
                out,
                Whitening {
                    factors: Some((half, inv_half)),
                },
            ))
        }
    }
}

/// Rewrites a model spec in whitened coordinates.
pub fn whiten_spec(spec: &ModelSpec, w: &Whitening) -> ModelSpec {
    ModelSpec {
        p: spec.p,
        theta_out0: spec.theta_out0,
        theta_out: w.whiten_coef(&spec.theta_out),
        theta_prop0: spec.theta_prop0,
        theta_prop: w.whiten_coef(&spec.theta_prop),
        mu_x: match &w.factors {
            None => spec.mu_x.clone(),
            Some((_, inv_half)) => inv_half * &spec.mu_x,
        },
        sigma: Covariance::Identity(spec.p),
        noise_sd: spec.noise_sd,
        link: spec.link.clone(),
    }
}
