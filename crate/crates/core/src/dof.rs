//! Degrees-of-freedom adjustment factors.
//!
//! For a fit with per-unit loss curvatures `c_i` and penalty-Hessian
//! eigenvalues `e_j` (on the whitened scale), the adjustments
//! `(zeta_theta, zeta_eta)` solve
//!
//! ```text
//! zeta_theta = (1/n) sum_i c_i / (zeta_eta c_i + 1)
//! zeta_eta   = (1/n) sum_j 1 / (zeta_theta + e_j)
//! ```
//!
//! Both maps are strictly decreasing Stieltjes-type transforms, so the system
//! has a unique positive solution; we find it by bisection on `zeta_eta`.
//!
//! With all-unit curvatures and a vanishing penalty this recovers the
//! least-squares values `zeta_theta = 1 - p/n`, `zeta_eta = (p/n)/(1 - p/n)`.

use crate::error::{Error, Result};
use crate::fits::{FitResult, Penalty, PropensityLoss};
use crate::model::Dataset;

const BRACKET_TOL: f64 = 1e-14;
const MAX_ITER: usize = 200;
const RESIDUAL_TOL: f64 = 1e-12;

/// Positive solution of the degrees-of-freedom equations plus solver
/// diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct DofAdjustments {
    pub zeta_theta: f64,
    pub zeta_eta: f64,
    pub iterations: usize,
    pub residual: f64,
}

fn zeta_theta_given_eta(curvatures: &[f64], n: f64, zeta_eta: f64) -> f64 {
    curvatures
        .iter()
        .map(|&c| c / (zeta_eta * c + 1.0))
        .sum::<f64>()
        / n
}

fn zeta_eta_given_theta(eigs: &[f64], n: f64, zeta_theta: f64) -> f64 {
    eigs.iter().map(|&e| 1.0 / (zeta_theta + e)).sum::<f64>() / n
}

/// Solves the fixed-point system for given curvatures and penalty spectrum.
pub fn solve_dof(curvatures: &[f64], hessian_eigs: &[f64], n: usize) -> Result<DofAdjustments> {
    if curvatures.iter().any(|c| !c.is_finite() || *c < 0.0)
        || hessian_eigs.iter().any(|e| !e.is_finite() || *e <= 0.0)
    {
        return Err(Error::Precondition(
            "dof solve needs finite curvatures >= 0 and penalty eigenvalues > 0".into(),
        ));
    }
    if curvatures.iter().all(|&c| c == 0.0) {
        return Err(Error::Precondition(
            "dof solve needs at least one positive curvature".into(),
        ));
    }
    let nf = n as f64;

    // The residual zeta_eta |-> f2(f1(zeta_eta)) - zeta_eta is positive at 0
    // and non-positive at (1/n) sum_j 1/e_j, with a unique root in between.
    let mut lo = 0.0f64;
    let mut hi = hessian_eigs.iter().map(|&e| 1.0 / e).sum::<f64>() / nf;
    let residual_at = |zeta_eta: f64| {
        zeta_eta_given_theta(
            hessian_eigs,
            nf,
            zeta_theta_given_eta(curvatures, nf, zeta_eta),
        ) - zeta_eta
    };
    let mut iterations = 0;
    for _ in 0..MAX_ITER {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if residual_at(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= BRACKET_TOL {
            break;
        }
    }
    let zeta_eta = 0.5 * (lo + hi);
    let zeta_theta = zeta_theta_given_eta(curvatures, nf, zeta_eta);
    let r1 = (zeta_theta - zeta_theta_given_eta(curvatures, nf, zeta_eta)).abs();
    let r2 = (zeta_eta - zeta_eta_given_theta(hessian_eigs, nf, zeta_theta)).abs();
    let residual = r1.max(r2);
    if !residual.is_finite() || residual > RESIDUAL_TOL {
        return Err(Error::NonConvergence {
            what: "degrees-of-freedom fixed point",
            iterations,
            residual,
        });
    }
    Ok(DofAdjustments {
        zeta_theta,
        zeta_eta,
        iterations,
        residual,
    })
}

/// Adjustments for an outcome fit: curvatures are `a_i w_i`, the penalty
/// spectrum is `lambda` repeated `p` times.
pub fn dof_for_outcome(
    fit: &FitResult,
    data: &Dataset,
    penalty: &Penalty,
) -> Result<DofAdjustments> {
    let curvatures: Vec<f64> = (0..data.n()).map(|i| data.a[i] * fit.weights[i]).collect();
    solve_dof(&curvatures, &penalty.hessian_eigs(data.p()), data.n())
}

/// Adjustments for a propensity fit: curvatures are the loss curvatures at
/// the fitted linear predictors. The `1/(2n)` prefactor on the loss sum makes
/// the effective penalty spectrum `2 lambda`.
pub fn dof_for_propensity(
    fit: &FitResult,
    data: &Dataset,
    penalty: &Penalty,
    loss: PropensityLoss,
) -> Result<DofAdjustments> {
    let eta = fit.linear_predictor(data);
    let curvatures: Vec<f64> = (0..data.n()).map(|i| loss.d2(eta[i], data.a[i])).collect();
    let eigs: Vec<f64> = penalty
        .hessian_eigs(data.p())
        .into_iter()
        .map(|e| 2.0 * e)
        .collect();
    solve_dof(&curvatures, &eigs, data.n())
}

/// Closed-form solution for ridge with Bernoulli curvatures (`c_i = a_i`,
/// all penalty eigenvalues equal to `lambda`): eliminating `zeta_eta` leaves
/// the scalar quadratic
///
/// ```text
/// zeta_theta (zeta_theta + lambda) = pi_bar (zeta_theta + lambda) - zeta_theta * p/n,
/// ```
///
/// solved by the quadratic formula. Serves as an independent oracle for
/// [`solve_dof`] and for population-level predictions.
pub fn ridge_bernoulli_dof(pi_bar: f64, lambda: f64, ratio_p_over_n: f64) -> (f64, f64) {
    let b = lambda + ratio_p_over_n - pi_bar;
    let zeta_theta = 0.5 * (-b + (b * b + 4.0 * pi_bar * lambda).sqrt());
    let zeta_eta = ratio_p_over_n / (zeta_theta + lambda);
    (zeta_theta, zeta_eta)
}
