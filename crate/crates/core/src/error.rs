//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A noise schedule violates its invariants (endpoints, monotonicity,
    /// terminal level) or was asked for an impossible re-gridding.
    #[error("invalid schedule: {0}")]
    Schedule(String),

    /// Array shapes do not agree with the operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is outside its documented domain.
    #[error("invalid config: {0}")]
    Config(String),

    /// Source data or an on-disk dataset failed validation.
    #[error("invalid data: {0}")]
    Data(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// A model emitted NaN or infinity for finite inputs.
    #[error("non-finite model output")]
    NonFinite,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
