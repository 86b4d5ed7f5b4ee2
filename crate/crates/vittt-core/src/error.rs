//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide error.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's preconditions.
    Shape(String),
    /// A public operation produced NaN or Inf.
    NonFinite(&'static str),
    /// Invalid configuration or argument values.
    Config(String),
    /// File or serialization failure.
    Io(String),
    /// Tape misuse (backward on a consumed tape, loss not scalar, ...).
    Tape(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::NonFinite(op) => write!(f, "non-finite value produced by `{op}`"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Tape(msg) => write!(f, "tape error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
