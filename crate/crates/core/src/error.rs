use thiserror::Error;

/// Errors surfaced by the library.
///
/// Numerical failures are reported eagerly instead of being propagated as
/// infinities or NaNs; a silent non-finite value inside the dual search or
/// the fitting pipeline is much harder to diagnose than an early error.
#[derive(Debug, Error)]
pub enum MdgpsError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("covariance is not symmetric positive definite: {context}")]
    NotPositiveDefinite { context: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("LQR backward recursion diverged at step {step} (value Hessian norm {norm:.3e})")]
    DivergentRecursion { step: usize, norm: f64 },

    #[error("dual search failed: {0}")]
    DualSearch(String),

    #[error("S-step failed: {0}")]
    SStep(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run log error: {0}")]
    RunLog(String),

    #[error("environment error: {0}")]
    Environment(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MdgpsError>;
