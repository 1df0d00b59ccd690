//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid model or run configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed on-disk data (checkpoint, IDX, CIFAR binary).
    #[error("format error: {0}")]
    Format(String),

    /// Semantically invalid data (label out of range, empty dataset).
    #[error("data error: {0}")]
    Data(String),

    /// Batch statistics cannot be computed (batch too small).
    #[error("statistics error: {0}")]
    Stats(String),

    /// API misuse: stale cache, mismatched key sets, missing state.
    #[error("usage error: {0}")]
    Usage(String),

    /// A stated precondition does not hold (e.g. non-converged record).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Pool indices (or similar) address memory outside the tensor.
    #[error("corrupted index data: {0}")]
    Corruption(String),

    /// Relaxation or adjoint pass produced non-finite values.
    #[error("numerical divergence in {context} at step {step}")]
    Divergence { context: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
