use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or field shapes do not conform.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// An input record violated the ingest preconditions.
    #[error("record {index} rejected: {reason}")]
    RecordRejected { index: usize, reason: String },
    /// Not enough data to run the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// A persisted file has the wrong magic or version.
    #[error("format error: {0}")]
    Format(String),
    /// A persisted file is truncated or internally inconsistent.
    #[error("corrupt file: {0}")]
    Corrupt(String),
    /// A computation produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the data rather than by how the tool was invoked.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::Usage(_))
    }
}
