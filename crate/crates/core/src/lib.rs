//! Debiased population-mean estimation for high-dimensional missing-data
//! models.
//!
//! Outcomes follow a linear model and missingness a binary GLM, with the
//! dimension allowed to exceed the sample size so that neither nuisance model
//! can be estimated consistently. The pipeline fits penalized base
//! estimators, solves degrees-of-freedom fixed points, and corrects the
//! plug-in mean with shifted-confounder debiasing, either with oracle
//! propensity knowledge (ASCW) or fully empirically (SCA). Classical
//! G-computation / IPW / AIPW baselines and a seeded Monte Carlo harness
//! round out the crate.

pub mod baselines;
pub mod config;
pub mod debias;
pub mod dof;
pub mod error;
pub mod fits;
pub mod harness;
pub mod link;
pub mod model;
pub mod quad;
pub mod summary;
pub mod theory;

pub use error::{Error, Result};
