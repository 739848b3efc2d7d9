use thiserror::Error;

/// Errors shared by every module in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/image extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Input data carries values an operation cannot accept (NaN/Inf, out of range).
    #[error("invalid value: {0}")]
    Value(String),

    /// A backward pass was handed a cache that does not match its forward.
    #[error("stale state: {0}")]
    State(String),

    /// A training loop had to abort (divergence, frozen-weight violation).
    #[error("training aborted at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    /// A file did not parse as the format it claims to be.
    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn value(msg: impl Into<String>) -> Self {
        Error::Value(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }
}
