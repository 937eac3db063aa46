use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("{0}")]
    Rejected(String),
    #[error("no moving pixels to sample drag points from")]
    NoMotion,
    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { context: context.into(), detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
