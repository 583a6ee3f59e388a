use std::fmt;

/// Error type shared across the library.
#[derive(Debug)]
pub enum Error {
    /// Shapes do not conform for the requested operation.
    Shape(String),
    /// An operation produced NaN or Inf.
    NonFinite(String),
    /// l2-normalization (or an angle) was requested on a vector with norm below 1e-12.
    ZeroNorm(String),
    /// Tape misuse: non-scalar backward, double backward without reset,
    /// cross-tape tensors, missing gradients.
    Tape(String),
    /// Invalid configuration or precondition violation.
    Validation(String),
    /// Training diverged (non-finite loss or gradient mid-run).
    Divergence(String),
    /// Malformed file contents (checkpoint, TSV, config).
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::ZeroNorm(m) => write!(f, "zero-norm vector: {m}"),
            Error::Tape(m) => write!(f, "tape error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Divergence(m) => write!(f, "divergence: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
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
