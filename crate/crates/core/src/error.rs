use thiserror::Error;

/// Errors raised by the simulation and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("delay tap {tap} is outside the unambiguous window of {n} samples")]
    DelayOutOfWindow { tap: i64, n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("unsupported constellation `{0}`")]
    UnsupportedConstellation(String),

    #[error("degenerate CFAR window: no training cells")]
    DegenerateWindow,

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("signal subspace rank {found} is below the requested model order {wanted}")]
    RankDeficient { wanted: usize, found: usize },

    #[error("ill-conditioned rotation system (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dims(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}
