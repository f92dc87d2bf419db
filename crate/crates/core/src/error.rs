use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by estimators, solvers, and the simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular linear system in {what}")]
    Singular { what: &'static str },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("rank-deficient fit: need at least {needed} rows, got {got}")]
    RankDeficient { needed: usize, got: usize },

    #[error("logistic fit diverged; data appears separable")]
    Separation,

    #[error("no observed outcomes (every a_i = 0)")]
    NoObservedUnits,

    #[error("target value {value} lies outside the link range ({lo}, {hi})")]
    LinkRange { value: f64, lo: f64, hi: f64 },

    #[error("shrinkage factor {beta:.3e} is below the degeneracy guard")]
    DegenerateShrinkage { beta: f64 },

    #[error("variance estimate tau^2 = {value:.3e} is negative")]
    NegativeTauSquared { value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{failed} of {total} replicates failed; first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
