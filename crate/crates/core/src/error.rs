use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid bound family: {0}")]
    InvalidBoundFamily(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid gamma: {0}")]
    InvalidGamma(String),

    #[error("Lipschitz budget undefined: {0}")]
    BudgetUndefined(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("extrapolation outside the grid: {0}")]
    Extrapolation(String),

    #[error("truncation error: {0}")]
    Truncation(String),

    #[error("no convergence after {iterations} iterations (step ratios {ratios:?})")]
    NonConvergence { iterations: usize, ratios: Vec<f64> },

    #[error("integrator step size underflow at t = {t}")]
    Stiffness { t: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
