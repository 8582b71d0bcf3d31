use thiserror::Error;

/// Errors produced by the numerical routines and optimizers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("dense buffer of {elements} entries exceeds the cap of {cap}")]
    TooLarge { elements: usize, cap: usize },

    /// An update produced NaN or Inf; the step was aborted.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
