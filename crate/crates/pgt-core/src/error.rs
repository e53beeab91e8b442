//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, schedules, training and I/O.
#[derive(Debug, Error)]
pub enum PgtError {
    /// Shape or channel-count mismatch between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// Inconsistent (T, T', P) triple or schedule/sequence mismatch.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Invalid configuration key, value, or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value encountered during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation called outside its domain (empty step, bad target frame, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PgtError>;

impl PgtError {
    pub fn shape(msg: impl Into<String>) -> Self {
        PgtError::Shape(msg.into())
    }

    pub fn schedule(msg: impl Into<String>) -> Self {
        PgtError::Schedule(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        PgtError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        PgtError::Numeric(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        PgtError::Domain(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        PgtError::Contract(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        PgtError::Checkpoint(msg.into())
    }
}
