use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure class, used for CLI exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("time alignment error: {0}")]
    Alignment(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("{path}: line {line}: {msg}")]
    Ingest { path: PathBuf, line: usize, msg: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("operation order violated: {0}")]
    Ordering(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Ordering(_) => ErrorCategory::Config,
            Error::Numerical(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
