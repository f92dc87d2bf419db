//! Empirical propensity-model summary statistics.
//!
//! From the raw rates and feature means alone one can recover the propensity
//! offset and signal strength: with `pi_hat` the observed fraction and
//! `gamma_prop_star_hat` the de-noised norm of `mean(x|a=1) - mean(x)`, the
//! pair `(mu_prop_hat, gamma_prop_hat)` solves
//!
//! ```text
//! E[pi(mu + gamma G)]   = pi_hat
//! E[G pi(mu + gamma G)] = pi_hat * gamma_prop_star_hat
//! ```
//!
//! which is the stationarity condition of the strictly convex objective
//! `E[F(v0 + v1 G)] - pi_hat v0 - pi_hat gamma_star v1` with `F' = pi`.
//! The link-moment ratios `alpha1`, `alpha2` and the covariance spike then
//! follow by quadrature.

use nalgebra::DVector;

use crate::dof::DofAdjustments;
use crate::error::{Error, Result};
use crate::fits::{FitResult, PropensityLoss};
use crate::link::LinkFunction;
use crate::model::Dataset;
use crate::quad::{gh_1d, gh_2d};

const MAX_ITER: usize = 100;

/// Rates and de-noised norms computed directly from the sample.
#[derive(Debug, Clone, Copy)]
pub struct RawMoments {
    /// Observed fraction `n1 / n`.
    pub pi_hat: f64,
    /// `sqrt((||mean(x)||^2 - p/n)_+)`, estimating `||mu_x||`.
    pub gamma_mu_hat: f64,
    /// `sqrt((||mean(x|a=1) - mean(x)||^2 - (p/n)(1-pi)/pi)_+)`, estimating
    /// `alpha1 ||theta_prop||`.
    pub gamma_prop_star_hat: f64,
}

/// Full set of propensity summary estimates.
#[derive(Debug, Clone, Copy)]
pub struct SummaryStats {
    pub pi_hat: f64,
    pub gamma_mu_hat: f64,
    pub gamma_prop_star_hat: f64,
    pub mu_prop_hat: f64,
    pub gamma_prop_hat: f64,
    pub alpha1_hat: f64,
    pub alpha2_hat: f64,
    pub sc_sigma_hat: f64,
}

/// Computes the raw moment estimates; requires at least one observed unit.
pub fn raw_moments(data: &Dataset) -> Result<RawMoments> {
    let n = data.n() as f64;
    let p = data.p() as f64;
    let n1 = data.n_observed();
    if n1 == 0 {
        return Err(Error::NoObservedUnits);
    }
    let pi_hat = n1 as f64 / n;
    let mean = data.mean_x();
    let mean_cfd = data.mean_x_observed()?;
    let gamma_mu_hat = (mean.norm_squared() - p / n).max(0.0).sqrt();
    let diff = &mean_cfd - &mean;
    let gamma_prop_star_hat = (diff.norm_squared() - (p / n) * (1.0 - pi_hat) / pi_hat)
        .max(0.0)
        .sqrt();
    Ok(RawMoments {
        pi_hat,
        gamma_mu_hat,
        gamma_prop_star_hat,
    })
}

/// Solves the offset/signal-strength fixed point. Returns
/// `(mu_prop_hat, gamma_prop_hat)`.
///
/// The system is the stationarity condition of a strictly convex objective,
/// so partially minimizing over the offset leaves a strictly convex function
/// of the strength whose derivative is the second equation's residual. Nested
/// bisection therefore converges for every link: the inner level solves
/// `E[pi(v0 + v1 G)] = pi_hat` for `v0` (monotone in `v0`), the outer level
/// drives `E[G pi(v0 + v1 G)] - pi_hat * gamma_star` to zero over `v1 >= 0`.
pub fn solve_offset_strength(
    pi_hat: f64,
    gamma_prop_star_hat: f64,
    link: &LinkFunction,
) -> Result<(f64, f64)> {
    let (lo, hi) = link.range();
    if !(pi_hat > lo && pi_hat < hi) {
        return Err(Error::LinkRange {
            value: pi_hat,
            lo,
            hi,
        });
    }
    let q = gh_1d();
    let offset_for = |v1: f64| -> Result<f64> {
        let rate = |v0: f64| q.expect(|g| link.eval(v0 + v1 * g));
        let (mut a, mut b) = (-1.0f64, 1.0f64);
        let mut tries = 0;
        while rate(a) > pi_hat {
            a *= 2.0;
            tries += 1;
            if tries > 60 {
                return Err(Error::NonConvergence {
                    what: "offset bracket",
                    iterations: tries,
                    residual: rate(a) - pi_hat,
                });
            }
        }
        tries = 0;
        while rate(b) < pi_hat {
            b *= 2.0;
            tries += 1;
            if tries > 60 {
                return Err(Error::NonConvergence {
                    what: "offset bracket",
                    iterations: tries,
                    residual: pi_hat - rate(b),
                });
            }
        }
        for _ in 0..MAX_ITER {
            let mid = 0.5 * (a + b);
            if rate(mid) < pi_hat {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= 1e-14 * (1.0 + mid.abs()) {
                break;
            }
        }
        Ok(0.5 * (a + b))
    };

    if gamma_prop_star_hat == 0.0 {
        return Ok((offset_for(0.0)?, 0.0));
    }

    // phi'(v1) = E[G pi(v0(v1) + v1 G)] - pi_hat * gamma_star is strictly
    // increasing; phi'(0) <= 0 since the first expectation vanishes there.
    let slope = |v1: f64| -> Result<f64> {
        let v0 = offset_for(v1)?;
        Ok(q.expect(|g| g * link.eval(v0 + v1 * g)) - pi_hat * gamma_prop_star_hat)
    };
    let mut a = 0.0f64;
    let mut b = gamma_prop_star_hat.max(1.0);
    let mut tries = 0;
    while slope(b)? < 0.0 {
        b *= 2.0;
        tries += 1;
        if b > 1e6 {
            return Err(Error::NonConvergence {
                what: "strength bracket",
                iterations: tries,
                residual: gamma_prop_star_hat,
            });
        }
    }
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (a + b);
        if slope(mid)? < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-13 * (1.0 + mid.abs()) {
            break;
        }
    }
    let v1 = 0.5 * (a + b);
    Ok((offset_for(v1)?, v1))
}

/// Link-moment ratios and the covariance spike at `(mu, gamma)`:
/// `alpha1 = E[pi'] / E[pi]`, `alpha2 = E[pi''] / E[pi]`,
/// `sc = (alpha2 - alpha1^2) / (1 + (alpha2 - alpha1^2) gamma^2)`.
pub fn alphas_and_spike(mu: f64, gamma: f64, link: &LinkFunction) -> (f64, f64, f64) {
    let q = gh_1d();
    let e0 = q.expect_affine(mu, gamma, |eta| link.eval(eta));
    let e1 = q.expect_affine(mu, gamma, |eta| link.d1(eta));
    let e2 = q.expect_affine(mu, gamma, |eta| link.d2(eta));
    let alpha1 = e1 / e0;
    let alpha2 = e2 / e0;
    let excess = alpha2 - alpha1 * alpha1;
    let sc = excess / (1.0 + excess * gamma * gamma);
    (alpha1, alpha2, sc)
}

/// Runs the full summary chain on a data set.
pub fn summarize(data: &Dataset, link: &LinkFunction) -> Result<SummaryStats> {
    let raw = raw_moments(data)?;
    let (mu_prop_hat, gamma_prop_hat) =
        solve_offset_strength(raw.pi_hat, raw.gamma_prop_star_hat, link)?;
    let (alpha1_hat, alpha2_hat, sc_sigma_hat) =
        alphas_and_spike(mu_prop_hat, gamma_prop_hat, link);
    Ok(SummaryStats {
        pi_hat: raw.pi_hat,
        gamma_mu_hat: raw.gamma_mu_hat,
        gamma_prop_star_hat: raw.gamma_prop_star_hat,
        mu_prop_hat,
        gamma_prop_hat,
        alpha1_hat,
        alpha2_hat,
        sc_sigma_hat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkageMethod {
    Moment,
    MEstimation,
}

/// Scalar correcting the shrinkage of the debiased propensity estimate.
#[derive(Debug, Clone, Copy)]
pub struct ShrinkageFactor {
    pub beta_hat: f64,
    pub method: ShrinkageMethod,
}

impl ShrinkageFactor {
    /// Below this magnitude any downstream division is refused.
    pub const DEGENERACY_GUARD: f64 = 1e-8;

    pub fn is_degenerate(&self) -> bool {
        self.beta_hat.abs() < Self::DEGENERACY_GUARD
    }
}

/// Moment-route shrinkage factor: `beta_hat = alpha1_hat`.
pub fn shrinkage_moment(stats: &SummaryStats) -> ShrinkageFactor {
    ShrinkageFactor {
        beta_hat: stats.alpha1_hat,
        method: ShrinkageMethod::Moment,
    }
}

/// M-estimation-route shrinkage factor.
///
/// Builds leave-one-out linear predictors
/// `eta_loo = eta_hat + zeta_eta * score`, their mean, and the cross moment
/// `s = sum_i (eta_loo_i - mean) a_i / (n pi_hat alpha1_hat)`, then evaluates
///
/// ```text
/// beta_hat = -E[ pi'(G_prop) * (loss'(prox[zeta_eta loss(.;1)](G_loo); 1)
///                             - loss'(prox[zeta_eta loss(.;0)](G_loo); 0)) ]
///            / zeta_theta
/// ```
///
/// over `(G_prop, G_loo)` bivariate Gaussian with mean
/// `(mu_prop_hat, mean(eta_loo))` and covariance
/// `[[gamma_prop^2, s], [s, ||theta_prop_hat||^2]]`, clamped to be positive
/// semi-definite. This is the empirical version of the fixed-point identity
/// equating the shrinkage with the average derivative of the propensity
/// influence function `-score / zeta_theta` in the true linear predictor;
/// for the shifted-square loss it reduces to
/// `E[pi'(G_prop)] / ((1 + zeta_eta) zeta_theta)`.
pub fn shrinkage_mestimation(
    data: &Dataset,
    prop_fit: &FitResult,
    prop_dof: &DofAdjustments,
    stats: &SummaryStats,
    loss: PropensityLoss,
    link: &LinkFunction,
) -> Result<ShrinkageFactor> {
    let n = data.n() as f64;
    let eta = prop_fit.linear_predictor(data);
    let eta_loo = DVector::from_fn(data.n(), |i, _| {
        eta[i] + prop_dof.zeta_eta * prop_fit.residual_score[i]
    });
    let loo_mean = eta_loo.sum() / n;

    let denom = n * stats.pi_hat * stats.alpha1_hat;
    if denom.abs() < 1e-12 {
        return Err(Error::DegenerateShrinkage {
            beta: stats.alpha1_hat,
        });
    }
    let s_cross = (0..data.n())
        .map(|i| (eta_loo[i] - loo_mean) * data.a[i])
        .sum::<f64>()
        / denom;

    let c11 = stats.gamma_prop_hat * stats.gamma_prop_hat;
    let c22 = prop_fit.coef.norm_squared();
    let chol = clamped_cholesky_2x2(c11, s_cross, c22)?;
    let beta = mest_beta_expectation(
        (stats.mu_prop_hat, loo_mean),
        chol,
        prop_dof.zeta_eta,
        prop_dof.zeta_theta,
        loss,
        link,
    );
    Ok(ShrinkageFactor {
        beta_hat: beta,
        method: ShrinkageMethod::MEstimation,
    })
}

/// The shrinkage-factor expectation
/// `-E[pi'(G_prop) * score_gap(zeta_eta, G_loo)] / zeta_theta` over a
/// bivariate Gaussian given by its mean and lower Cholesky factor.
pub(crate) fn mest_beta_expectation(
    mean: (f64, f64),
    chol_lower: [[f64; 2]; 2],
    zeta_eta: f64,
    zeta_theta: f64,
    loss: PropensityLoss,
    link: &LinkFunction,
) -> f64 {
    -gh_2d().expect_bivariate(mean, chol_lower, |g_prop, g_loo| {
        link.d1(g_prop) * loss.score_gap(zeta_eta, g_loo)
    }) / zeta_theta
}

/// Lower Cholesky factor of a symmetric 2x2 matrix after flooring its
/// eigenvalues at 1e-10.
fn clamped_cholesky_2x2(c11: f64, c12: f64, c22: f64) -> Result<[[f64; 2]; 2]> {
    if !(c11.is_finite() && c12.is_finite() && c22.is_finite()) {
        return Err(Error::NotPositiveDefinite(
            "shrinkage covariance has non-finite entries".into(),
        ));
    }
    const FLOOR: f64 = 1e-10;
    let tr = c11 + c22;
    let det = c11 * c22 - c12 * c12;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    let (c11, c12, c22) = if l2 < FLOOR {
        // Rebuild from the clamped spectral decomposition.
        let (e1, e2) = (l1.max(FLOOR), FLOOR);
        // Eigenvector for l1.
        let (vx, vy) = if c12.abs() > 1e-300 {
            (l1 - c22, c12)
        } else if c11 >= c22 {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let norm = (vx * vx + vy * vy).sqrt();
        let (ux, uy) = (vx / norm, vy / norm);
        (
            e1 * ux * ux + e2 * uy * uy,
            (e1 - e2) * ux * uy,
            e1 * uy * uy + e2 * ux * ux,
        )
    } else {
        (c11, c12, c22)
    };
    let l11 = c11.sqrt();
    let l21 = c12 / l11;
    let l22 = (c22 - l21 * l21).max(0.0).sqrt();
    Ok([[l11, 0.0], [l21, l22]])
}
