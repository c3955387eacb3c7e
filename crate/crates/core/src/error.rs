use std::fmt;

/// Error type shared by every module in the crate.
#[derive(Debug)]
pub enum Error {
    /// A numeric precondition was violated (non-finite input, zero norm, ...).
    Numeric(String),
    /// Shapes or index ranges do not line up.
    Shape(String),
    /// A configuration field (or combination of fields) is invalid.
    Config(String),
    /// A file could not be parsed (bad header, truncation, version mismatch).
    Format(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
