use std::fmt;
use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape(String),
    /// Bad argument or configuration value.
    Invalid(String),
    /// Token id outside the configured vocabulary.
    Vocab { id: u32, vocab_size: usize },
    /// A gradient or loss value that must be finite was not.
    NonFinite(String),
    /// I/O failure, with the path that caused it.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed input while parsing a config, checkpoint, or CSV.
    Parse(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Vocab { id, vocab_size } => {
                write!(
                    f,
                    "token id {id} out of range for vocabulary of {vocab_size}"
                )
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io { path, source } => write!(f, "io error at {}: {source}", path.display()),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
