//! Error taxonomy shared by the whole crate.
//!
//! The CLI maps these onto process exit codes: data/format/io problems
//! exit 2, configuration problems exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Wrong shapes, unknown keys, incompatible schema hashes, bad hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad values in data: out-of-range categorical ids, undersized batches, malformed records.
    #[error("data error: {0}")]
    Data(String),

    /// Corrupt or unsupported file envelopes (magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for data/format/io, 3 for configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
