//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; the message names the offending key
    /// or parameter.
    #[error("config error: {0}")]
    Config(String),

    /// No architecture/knob satisfies the given device constraints.
    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    /// Numerical failure (non-finite loss, SVD non-convergence, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Tensor shape or index mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed or unreadable checkpoint / data file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
