use thiserror::Error;

/// Errors raised by configuration, shape checks and plan handling.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid fault plan: {0}")]
    Plan(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn plan(msg: impl Into<String>) -> Self {
        Error::Plan(msg.into())
    }
}
