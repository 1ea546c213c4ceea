//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Sparsity or norm queried over a scope that holds no parameters.
    EmptyScope,
    /// Two aligned vectors or layouts disagree in length.
    ShapeMismatch { expected: usize, got: usize },
    /// A proximal threshold was negative.
    InvalidThreshold(f64),
    /// A group partition does not tile the vector.
    InvalidPartition { len: usize, group_size: usize },
    /// The dual vector is not a valid elastic-net subgradient at the given point.
    NotASubgradient { index: usize },
    /// Tensor names within a store must be unique.
    DuplicateName(String),
    /// A run or model configuration failed validation.
    InvalidConfig(String),
    /// Training aborted: non-finite loss or exploding parameter norm.
    Diverged { step: u64 },
    /// An iterative solver did not reach its tolerance.
    NonConvergence { iterations: usize },
    /// A numeric input that must be finite was not.
    NonFinite(&'static str),
    /// Malformed checkpoint or log data.
    Serialization(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyScope => write!(f, "scope contains no parameters"),
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected} values, got {got}")
            }
            Error::InvalidThreshold(t) => write!(f, "threshold must be nonnegative, got {t}"),
            Error::InvalidPartition { len, group_size } => {
                write!(f, "group size {group_size} does not partition a vector of length {len}")
            }
            Error::NotASubgradient { index } => {
                write!(f, "dual vector is not an elastic-net subgradient (first bad index {index})")
            }
            Error::DuplicateName(name) => write!(f, "duplicate tensor name {name:?}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Diverged { step } => write!(f, "training diverged at step {step}"),
            Error::NonConvergence { iterations } => {
                write!(f, "iteration did not converge within {iterations} iterations")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Serialization(msg) => write!(f, "serialization error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
