use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("backward requires a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;
