//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failures raised by model construction, learners, and diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition (shape, range, index).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A computation produced or received non-finite numbers.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The operation needs a capability the input does not have,
    /// e.g. an exact gradient over black-box controllers.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Argument(msg()))
    }
}
