use thiserror::Error;

/// Errors raised by tensor construction and recorded operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {got}")]
    Length {
        shape: [usize; 2],
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("symbolic gradient is not available through `{0}`")]
    Unsupported(&'static str),
}

pub type Result<T, E = TapeError> = std::result::Result<T, E>;
