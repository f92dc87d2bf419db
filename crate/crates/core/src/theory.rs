//! Analytic bias predictions for the debiasing constructions.
//!
//! A debiasing built from a modified mean `mu + sc_mu * theta_prop` and
//! modified inverse covariance `I - sc_sigma * theta_prop theta_prop^T`
//! concentrates on a bias that factors through the modified propensity score
//!
//! ```text
//! pi_zeta(eta) = zeta w(eta) / (1 + zeta w(eta)) * pi(eta)
//! ```
//!
//! via `alpha1(zeta) = E[pi_zeta'] / E[pi_zeta]` and
//! `alpha2(zeta) = E[pi_zeta''] / E[pi_zeta]` over the propensity linear
//! predictor. The induced mean bias is
//! `<theta_prop, theta_out - theta_hat> * (bias1 - sc_mu * bias2 * ||theta_prop||^2)`
//! with `bias1 = alpha1(zeta) - sc_mu` and
//! `bias2 = (alpha2 - alpha1^2)(1 - sc_sigma ||theta_prop||^2) - sc_sigma`.
//! Both vanish exactly under the oracle shifted-confounder choice.

use crate::dof::{ridge_bernoulli_dof, DofAdjustments};
use crate::error::{Error, Result};
use crate::fits::WeightScheme;
use crate::link::LinkFunction;
use crate::model::ModelSpec;
use crate::quad::gh_1d;

/// Analytic prediction of the two bias scalars.
#[derive(Debug, Clone, Copy)]
pub struct BiasPrediction {
    pub alpha1_zeta: f64,
    pub alpha2_zeta: f64,
    pub bias1: f64,
    pub bias2: f64,
    pub sc_mu: f64,
    pub sc_sigma: f64,
    pub weight_scheme: WeightScheme,
}

/// `(pi_zeta, pi_zeta', pi_zeta'')` at `eta` for the given weight scheme.
///
/// With unit weights the prefactor `zeta/(1+zeta)` is constant and cancels in
/// every ratio. For `w = 1/(pi - omega)` the modified score is
/// `zeta pi / (zeta + pi - omega)`, differentiated in closed form.
pub fn modified_propensity(
    link: &LinkFunction,
    scheme: WeightScheme,
    zeta: f64,
    eta: f64,
) -> (f64, f64, f64) {
    let (p, d1, d2) = crate::link::link_eval(link, eta);
    match scheme {
        WeightScheme::Unit => {
            let c = zeta / (1.0 + zeta);
            (c * p, c * d1, c * d2)
        }
        WeightScheme::InversePropensity => modified_ipw(p, d1, d2, zeta, 0.0),
        WeightScheme::DofAdjustedInversePropensity { omega } => {
            modified_ipw(p, d1, d2, zeta, omega)
        }
    }
}

fn modified_ipw(p: f64, d1: f64, d2: f64, zeta: f64, omega: f64) -> (f64, f64, f64) {
    let denom = zeta + p - omega;
    let value = zeta * p / denom;
    let first = zeta * (zeta - omega) * d1 / (denom * denom);
    let second = zeta * (zeta - omega) * (d2 * denom - 2.0 * d1 * d1) / (denom * denom * denom);
    (value, first, second)
}

/// Link-moment ratios of the modified propensity score over
/// `eta ~ N(mu_prop, gamma_prop^2)`.
pub fn alphas_zeta(
    link: &LinkFunction,
    scheme: WeightScheme,
    zeta: f64,
    mu_prop: f64,
    gamma_prop: f64,
) -> (f64, f64) {
    let q = gh_1d();
    let e0 = q.expect_affine(mu_prop, gamma_prop, |eta| {
        modified_propensity(link, scheme, zeta, eta).0
    });
    let e1 = q.expect_affine(mu_prop, gamma_prop, |eta| {
        modified_propensity(link, scheme, zeta, eta).1
    });
    let e2 = q.expect_affine(mu_prop, gamma_prop, |eta| {
        modified_propensity(link, scheme, zeta, eta).2
    });
    (e1 / e0, e2 / e0)
}

/// Predicts the bias scalars of a debiasing construction on the whitened
/// scale.
pub fn predict_bias(
    spec: &ModelSpec,
    zeta_eta: f64,
    sc_mu: f64,
    sc_sigma: f64,
    scheme: WeightScheme,
) -> BiasPrediction {
    let mu_prop = spec.mu_prop();
    let gamma_prop = spec.gamma_prop();
    let (alpha1_zeta, alpha2_zeta) = alphas_zeta(&spec.link, scheme, zeta_eta, mu_prop, gamma_prop);
    let excess = alpha2_zeta - alpha1_zeta * alpha1_zeta;
    let gamma_sq = gamma_prop * gamma_prop;
    BiasPrediction {
        alpha1_zeta,
        alpha2_zeta,
        bias1: alpha1_zeta - sc_mu,
        bias2: excess * (1.0 - sc_sigma * gamma_sq) - sc_sigma,
        sc_mu,
        sc_sigma,
        weight_scheme: scheme,
    }
}

/// The oracle shifted-confounder parameterization `(sc_mu, sc_sigma)` for a
/// model: `sc_mu = alpha1`,
/// `sc_sigma = (alpha2 - alpha1^2)/(1 + (alpha2 - alpha1^2)||theta_prop||^2)`.
pub fn oracle_sc_parameters(spec: &ModelSpec) -> (f64, f64, f64, f64) {
    let (alpha1, alpha2, sc_sigma) =
        crate::summary::alphas_and_spike(spec.mu_prop(), spec.gamma_prop(), &spec.link);
    (alpha1, alpha2, alpha1, sc_sigma)
}

/// Predicted mean bias `inner * (bias1 - sc_mu * bias2 * gamma^2)` given the
/// (empirical or asymptotic) coefficient-error alignment
/// `inner = <theta_prop, theta_out - theta_hat>`.
pub fn predicted_mean_bias(pred: &BiasPrediction, inner: f64, gamma_prop_sq: f64) -> f64 {
    inner * (pred.bias1 - pred.sc_mu * pred.bias2 * gamma_prop_sq)
}

/// Sign classification of the naive debiased-ridge bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureRegion {
    BiasedPositive,
    BiasedNegative,
    Indeterminate,
}

/// Margin below which the failure-region score is called indeterminate.
pub const FAILURE_MARGIN: f64 = 0.05;

/// Predicts the sign of the naive debiased-ridge bias from the alignment
/// `<theta_prop, theta_out>` and the signal strength, using the ridge
/// shrinkage surrogate `zeta_theta / (lambda + zeta_theta)` in place of the
/// unknown coefficient of `||theta_prop||^2`. Identity covariance only.
pub fn predict_failure_region(spec: &ModelSpec, lambda: f64, n: usize) -> Result<FailureRegion> {
    if !spec.sigma.is_identity() {
        return Err(Error::Precondition(
            "failure-region prediction assumes identity covariance".into(),
        ));
    }
    let pi_bar =
        gh_1d().expect_affine(spec.mu_prop(), spec.gamma_prop(), |eta| spec.link.eval(eta));
    let ratio = spec.p as f64 / n as f64;
    let (zeta_theta, _) = ridge_bernoulli_dof(pi_bar, lambda, ratio);
    let shrink = zeta_theta / (lambda + zeta_theta);
    let score = shrink * spec.theta_prop.norm_squared() + spec.theta_prop.dot(&spec.theta_out);
    Ok(if score > FAILURE_MARGIN {
        FailureRegion::BiasedPositive
    } else if score < -FAILURE_MARGIN {
        FailureRegion::BiasedNegative
    } else {
        FailureRegion::Indeterminate
    })
}

/// Empirical proxy `|zeta_eta / lambda - omega|` bounding the bias of the
/// degrees-of-freedom-adjusted IPW debiasing. Requires strict overlap with
/// `0 < omega < inf pi`.
pub fn dof_ipw_bias_bound(
    spec: &ModelSpec,
    lambda: f64,
    omega: f64,
    fitted_dof: &DofAdjustments,
) -> Result<f64> {
    let floor = spec.link.range().0;
    if !(omega > 0.0 && omega < floor) {
        return Err(Error::Precondition(format!(
            "omega = {omega} must lie in (0, inf pi = {floor})"
        )));
    }
    Ok((fitted_dof.zeta_eta / lambda - omega).abs())
}
