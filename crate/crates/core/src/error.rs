use thiserror::Error;

/// Errors raised by the clustering engine and its numerical primitives.
#[derive(Debug, Error)]
pub enum OcfError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("numerically degenerate matrix (condition estimate {condition:.3e})")]
    Degenerate { condition: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("model not ready: no clustering trigger has completed yet")]
    NotReady,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OcfError>;
