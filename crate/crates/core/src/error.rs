use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Format,
    Input,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Input => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Format => 4,
            ErrorCategory::Numeric => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Input => "invalid input",
            ErrorCategory::Io => "i/o error",
            ErrorCategory::Format => "format error",
            ErrorCategory::Numeric => "numeric failure",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{0}")]
    Format(String),

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(u16),

    #[error("{0}")]
    InvalidInput(String),

    #[error("message of {message} bits exceeds capacity of {capacity} bits")]
    CapacityExceeded { message: usize, capacity: usize },

    #[error("capacity mismatch: job carries {message} bits but the stream yields {expected}")]
    CapacityMismatch { message: usize, expected: usize },

    #[error("parity unreachable in frame {frame}")]
    ParityUnreachable { frame: usize },

    #[error("degenerate cover set: normal equations are rank deficient")]
    DegenerateCoverSet,

    #[error("divergence: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::Format(_) | Error::UnsupportedBitDepth(_) => ErrorCategory::Format,
            Error::InvalidInput(_)
            | Error::CapacityExceeded { .. }
            | Error::CapacityMismatch { .. }
            | Error::Shape(_) => ErrorCategory::Input,
            Error::ParityUnreachable { .. }
            | Error::DegenerateCoverSet
            | Error::Divergence { .. } => ErrorCategory::Numeric,
        }
    }
}
