use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("cannot fit class {class_id}: {reason}")]
    Fit { class_id: u32, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("model set incomplete: no model for class {0}")]
    MissingClass(u32),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn record(index: usize, reason: impl Into<String>) -> Self {
        Error::InvalidRecord {
            index,
            reason: reason.into(),
        }
    }
}
