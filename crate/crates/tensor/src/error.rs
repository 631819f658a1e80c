use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("shapes {lhs:?} and {rhs:?} are not broadcast-compatible")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("cannot resize {from:?} by a non-integral factor to {to:?}")]
    NonIntegralResize { from: (usize, usize), to: (f64, f64) },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
