//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SplatError {
    /// A caller violated a documented precondition (shape mismatch,
    /// missing backward data, out-of-range argument, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric argument was non-finite or outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// File could not be read or written.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A binary or text file did not match its declared format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Config file problem, names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Lookup of an unknown name (codebook class, manifest entry, ...).
    #[error("unknown name: {0}")]
    UnknownName(String),
}

impl SplatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SplatError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SplatError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 i/o, 3 contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            SplatError::Io { .. } | SplatError::Format { .. } => 2,
            SplatError::Config(_) | SplatError::UnknownName(_) => 1,
            SplatError::Contract(_) | SplatError::InvalidParameter(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, SplatError>;
