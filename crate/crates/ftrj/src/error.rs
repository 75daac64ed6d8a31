//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid lineage graph (missing self-loop, non-binary entry, size mismatch).
    #[error("invalid lineage: {0}")]
    InvalidLineage(String),

    /// Invalid or out-of-range configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed dataset, checkpoint, or other input payload.
    #[error("data error: {0}")]
    Data(String),

    /// A derivative query that is ill-defined in the requested mode.
    #[error("unsupported derivative: {0}")]
    UnsupportedDerivative(String),

    /// Training diverged or could not proceed.
    #[error("training error: {0}")]
    Training(String),

    /// Transport solver failure.
    #[error("transport error: {0}")]
    Transport(String),

    /// Evaluation failure (missing timepoint, empty marginal).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON encode/decode failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
