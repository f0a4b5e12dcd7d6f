use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: format error: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Validation {
        path: PathBuf,
        #[source]
        source: osgate_core::Error,
    },
    #[error(transparent)]
    Core(#[from] osgate_core::Error),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 usage, 3 data validation, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use osgate_core::Error as E;
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Validation { .. } => 3,
            Error::Core(e) => match e {
                E::Numerical(_) | E::Fit { .. } => 4,
                E::InvalidArgument(_) | E::Config(_) => 2,
                _ => 3,
            },
        }
    }
}
