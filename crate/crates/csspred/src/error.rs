//! Crate-wide error type. Most numeric kernels are infallible by
//! construction; errors surface at validation and I/O boundaries.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A configuration value is outside its documented domain.
    InvalidConfig(String),
    /// An operation that needs at least one element received none.
    EmptySelection(&'static str),
    /// A serialized tensor or mask file is malformed.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::EmptySelection(op) => write!(f, "{op}: empty selection"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
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
