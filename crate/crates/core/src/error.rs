//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the FLR pipeline.
#[derive(Debug, Error)]
pub enum FlrError {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Every position of a softmax row was masked out.
    #[error("masked softmax: row {row} is fully masked")]
    FullyMasked { row: usize },
    /// A sequence is longer than the configured limit.
    #[error("sequence length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset construction or ingestion failure.
    #[error("data error: {0}")]
    Data(String),
    /// Two catalog items share one tokenized title.
    #[error("duplicate titles for items {items:?}")]
    DuplicateTitle { items: Vec<u32> },
    /// A loss, ratio or parameter became non-finite.
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FlrError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> FlrError {
    FlrError::Contract(msg.into())
}
