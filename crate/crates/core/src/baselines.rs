//! Classical G-computation, IPW, and AIPW estimators with cross-fitting.
//!
//! A 1-fold scheme fits the nuisance functions and averages on all the data.
//! A 2-fold scheme splits in half, fits both nuisances on one half and
//! averages on the other, then swaps roles and averages the two estimates.
//! A 3-fold scheme splits in thirds, fits the outcome model on one fold, the
//! propensity model on another, averages on the third, and averages over all
//! six role permutations. Propensity predictions clamp below at 1e-6 before
//! entering a denominator.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::link::LinkFunction;
use crate::model::Dataset;

const PROPENSITY_CLAMP: f64 = 1e-6;

/// Number of cross-fitting folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Folds {
    One,
    Two,
    Three,
}

impl Folds {
    pub fn count(&self) -> usize {
        match self {
            Self::One => 1,
            Self::Two => 2,
            Self::Three => 3,
        }
    }
}

/// Deterministic fold assignment from a seeded shuffle; fold sizes differ by
/// at most one.
#[derive(Debug, Clone)]
pub struct CrossFitPlan {
    pub folds: Folds,
    pub assignment: Vec<u8>,
}

impl CrossFitPlan {
    pub fn new(folds: Folds, n: usize, seed: u64) -> Self {
        let k = folds.count();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut assignment = vec![0u8; n];
        for (pos, &idx) in order.iter().enumerate() {
            assignment[idx] = (pos % k) as u8;
        }
        Self { folds, assignment }
    }

    pub fn fold_rows(&self, fold: u8) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }
}

/// Fitted outcome model used for prediction on held-out units.
#[derive(Debug, Clone)]
pub struct LinearOutcomeModel {
    pub intercept: f64,
    pub coef: DVector<f64>,
}

impl LinearOutcomeModel {
    pub fn predict(&self, data: &Dataset, row: usize) -> f64 {
        self.intercept + data.x.row(row).transpose().dot(&self.coef)
    }
}

/// Fitted propensity model; predictions pass the linear predictor through
/// the supplied link.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub intercept: f64,
    pub coef: DVector<f64>,
    pub link: LinkFunction,
}

impl PropensityModel {
    pub fn predict(&self, data: &Dataset, row: usize) -> f64 {
        let eta = self.intercept + data.x.row(row).transpose().dot(&self.coef);
        self.link.eval(eta).max(PROPENSITY_CLAMP)
    }
}

/// Fits an outcome model on the given rows of the data.
pub type OutcomeFitter<'a> = &'a dyn Fn(&Dataset, &[usize]) -> Result<LinearOutcomeModel>;
/// Fits a propensity model on the given rows of the data.
pub type PropensityFitter<'a> = &'a dyn Fn(&Dataset, &[usize]) -> Result<PropensityModel>;

/// OLS on the observed units of the training rows.
pub fn ols_outcome_fitter() -> impl Fn(&Dataset, &[usize]) -> Result<LinearOutcomeModel> {
    |data: &Dataset, rows: &[usize]| {
        let sub = data.subset(rows);
        let fit = crate::fits::fit_ols(&sub)?;
        Ok(LinearOutcomeModel {
            intercept: fit.intercept,
            coef: fit.coef,
        })
    }
}

/// Unit-weight ridge on the observed units of the training rows.
pub fn ridge_outcome_fitter(
    lambda: f64,
) -> impl Fn(&Dataset, &[usize]) -> Result<LinearOutcomeModel> {
    move |data: &Dataset, rows: &[usize]| {
        let sub = data.subset(rows);
        let penalty = crate::fits::Penalty::ridge(lambda)?;
        let fit = crate::fits::fit_outcome(&sub, &penalty, crate::fits::WeightScheme::Unit, None)?;
        Ok(LinearOutcomeModel {
            intercept: fit.intercept,
            coef: fit.coef,
        })
    }
}

/// Unpenalized logistic regression of `a` on the features; predictions go
/// through `predict_link` (typically the known model link).
pub fn logistic_propensity_fitter(
    predict_link: LinkFunction,
) -> impl Fn(&Dataset, &[usize]) -> Result<PropensityModel> {
    move |data: &Dataset, rows: &[usize]| {
        let sub = data.subset(rows);
        let fit = crate::fits::fit_logistic_unpenalized(&sub)?;
        Ok(PropensityModel {
            intercept: fit.intercept,
            coef: fit.coef,
            link: predict_link.clone(),
        })
    }
}

/// Which classical estimator to evaluate on the held-out fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassicalEstimator {
    G,
    Ipw,
    Aipw,
}

fn eval_on_fold(
    data: &Dataset,
    rows: &[usize],
    estimator: ClassicalEstimator,
    outcome: Option<&LinearOutcomeModel>,
    propensity: Option<&PropensityModel>,
) -> f64 {
    let mut acc = 0.0;
    for &i in rows {
        let term = match estimator {
            ClassicalEstimator::G => outcome.expect("G needs an outcome model").predict(data, i),
            ClassicalEstimator::Ipw => {
                let pi = propensity
                    .expect("IPW needs a propensity model")
                    .predict(data, i);
                data.a[i] * data.y[i] / pi
            }
            ClassicalEstimator::Aipw => {
                let mu = outcome
                    .expect("AIPW needs an outcome model")
                    .predict(data, i);
                let pi = propensity
                    .expect("AIPW needs a propensity model")
                    .predict(data, i);
                mu + data.a[i] * (data.y[i] - mu) / pi
            }
        };
        acc += term;
    }
    acc / rows.len() as f64
}

/// Runs a classical estimator under the cross-fitting plan.
pub fn estimate_classical(
    data: &Dataset,
    estimator: ClassicalEstimator,
    plan: &CrossFitPlan,
    outcome_fitter: OutcomeFitter<'_>,
    propensity_fitter: PropensityFitter<'_>,
) -> Result<f64> {
    let needs_outcome = estimator != ClassicalEstimator::Ipw;
    let needs_propensity = estimator != ClassicalEstimator::G;
    let all_rows: Vec<usize> = (0..data.n()).collect();

    match plan.folds {
        Folds::One => {
            let outcome = if needs_outcome {
                Some(outcome_fitter(data, &all_rows)?)
            } else {
                None
            };
            let propensity = if needs_propensity {
                Some(propensity_fitter(data, &all_rows)?)
            } else {
                None
            };
            Ok(eval_on_fold(
                data,
                &all_rows,
                estimator,
                outcome.as_ref(),
                propensity.as_ref(),
            ))
        }
        Folds::Two => {
            let folds: Vec<Vec<usize>> = (0..2).map(|f| plan.fold_rows(f)).collect();
            let mut total = 0.0;
            for eval in 0..2 {
                let train = &folds[1 - eval];
                let outcome = if needs_outcome {
                    Some(outcome_fitter(data, train)?)
                } else {
                    None
                };
                let propensity = if needs_propensity {
                    Some(propensity_fitter(data, train)?)
                } else {
                    None
                };
                total += eval_on_fold(
                    data,
                    &folds[eval],
                    estimator,
                    outcome.as_ref(),
                    propensity.as_ref(),
                );
            }
            Ok(total / 2.0)
        }
        Folds::Three => {
            let folds: Vec<Vec<usize>> = (0..3).map(|f| plan.fold_rows(f)).collect();
            // All 6 assignments of (outcome fold, propensity fold, eval fold).
            let perms = [
                [0, 1, 2],
                [0, 2, 1],
                [1, 0, 2],
                [1, 2, 0],
                [2, 0, 1],
                [2, 1, 0],
            ];
            let mut total = 0.0;
            for perm in perms {
                let outcome = if needs_outcome {
                    Some(outcome_fitter(data, &folds[perm[0]])?)
                } else {
                    None
                };
                let propensity = if needs_propensity {
                    Some(propensity_fitter(data, &folds[perm[1]])?)
                } else {
                    None
                };
                total += eval_on_fold(
                    data,
                    &folds[perm[2]],
                    estimator,
                    outcome.as_ref(),
                    propensity.as_ref(),
                );
            }
            Ok(total / 6.0)
        }
    }
}

/// G-computation under the plan.
pub fn estimate_g(
    data: &Dataset,
    outcome_fitter: OutcomeFitter<'_>,
    plan: &CrossFitPlan,
) -> Result<f64> {
    let dummy = |_: &Dataset, _: &[usize]| -> Result<PropensityModel> {
        Err(Error::Precondition(
            "G-computation has no propensity model".into(),
        ))
    };
    estimate_classical(data, ClassicalEstimator::G, plan, outcome_fitter, &dummy)
}

/// Inverse probability weighting under the plan.
pub fn estimate_ipw(
    data: &Dataset,
    propensity_fitter: PropensityFitter<'_>,
    plan: &CrossFitPlan,
) -> Result<f64> {
    let dummy = |_: &Dataset, _: &[usize]| -> Result<LinearOutcomeModel> {
        Err(Error::Precondition("IPW has no outcome model".into()))
    };
    estimate_classical(
        data,
        ClassicalEstimator::Ipw,
        plan,
        &dummy,
        propensity_fitter,
    )
}

/// Augmented IPW under the plan.
pub fn estimate_aipw(
    data: &Dataset,
    outcome_fitter: OutcomeFitter<'_>,
    propensity_fitter: PropensityFitter<'_>,
    plan: &CrossFitPlan,
) -> Result<f64> {
    estimate_classical(
        data,
        ClassicalEstimator::Aipw,
        plan,
        outcome_fitter,
        propensity_fitter,
    )
}
