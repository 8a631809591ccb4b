use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel size must be positive and finite, got {0}")]
    KernelDomain(f64),
    #[error("direction ({0}, {1}) is outside the upper hemisphere")]
    InvalidDirection(f64, f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss {loss} at iteration {iteration} (batch of {batch}, mean target {mean_target})")]
    NonFiniteLoss {
        iteration: usize,
        loss: f64,
        batch: usize,
        mean_target: f64,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("scene file line {line}: {message}")]
    Scene { line: usize, message: String },
}

/// Failures while decoding one of the binary file formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("malformed contents: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
