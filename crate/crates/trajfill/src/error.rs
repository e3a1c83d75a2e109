//! Error type shared across the pipeline.
//!
//! Variants map one-to-one onto the CLI exit codes: config 2, data 3,
//! numerical 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run configuration; the message names the offending key path.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset / prediction / answer-key input.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values, divergence, or a failed numerical verification.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for the CLI: 0 is success, anything here is failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Serde(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
