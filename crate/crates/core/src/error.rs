//! Error type shared by the whole crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("component {component} has near-zero responsibility mass ({mass:.3e})")]
    EmptyComponent { component: usize, mass: f64 },

    #[error("singular system for component {component}: {detail}")]
    SingularSystem { component: usize, detail: String },

    #[error("stale statistics: {0}")]
    StaleStats(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("optimizer failed: {0}")]
    Optim(String),

    #[error("{}: {message} (byte offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Coarse failure class, used by callers that map errors to process exit
/// codes: bad invocation, bad data, or a numerical breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorClass::Usage,
            Error::DimensionMismatch { .. }
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Manifest(_)
            | Error::StaleStats(_) => ErrorClass::Data,
            Error::NotPositiveDefinite(_)
            | Error::EmptyComponent { .. }
            | Error::SingularSystem { .. }
            | Error::NonFinite(_)
            | Error::Optim(_) => ErrorClass::Numerical,
        }
    }
}
