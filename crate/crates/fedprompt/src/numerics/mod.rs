//! Tensor arithmetic and reverse-mode differentiation.

mod tape;
mod tensor;

pub mod fdcheck;

pub use tape::{GradientMap, NodeId, Tape};
pub use tensor::{
    cosine_similarity, fingerprint_all, log_softmax, softmax, softmax_cross_entropy, Tensor,
};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("vector norm at or below 1e-12")]
    ZeroNorm,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("parameter '{name}' is not connected to the loss")]
    DisconnectedParameter { name: String },
    #[error("non-finite value at position {position}")]
    NonFinite { position: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter '{name}' registered twice on one tape")]
    DuplicateParameter { name: String },
    #[error("operation requires a non-empty input")]
    EmptyInput,
}
