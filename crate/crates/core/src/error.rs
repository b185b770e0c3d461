//! Crate-wide error type. Every fallible operation returns `Result<T>`.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes, with both shapes named.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A kernel produced a NaN or infinity. Never silent.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    /// A softmax row was entirely masked.
    #[error("softmax: row {row} is fully masked (degenerate)")]
    DegenerateRow { row: usize },

    #[error("{op}: index {index} out of bounds (len {len})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },

    /// Backward was invoked on a non-scalar tensor.
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    /// Requested more items than available (e.g. sampling n > M points).
    #[error("{op}: requested {requested} items but only {available} available")]
    Cardinality {
        op: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("config: {0}")]
    Config(String),

    /// Sequence layout violated a structural precondition.
    #[error("layout: {0}")]
    Layout(String),

    /// Training aborted because the loss became NaN.
    #[error("training: loss became NaN at step {step}")]
    NanLoss { step: usize },

    #[error("{op}: malformed data: {detail}")]
    Format { op: &'static str, detail: String },

    #[error("vocabulary: unknown token {0:?}")]
    UnknownToken(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
