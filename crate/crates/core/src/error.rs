use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the segmentation framework.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or image did not have the required shape. The message names
    /// the offending axis and the required divisibility or size.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A layer or network was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Two parameter sets did not line up (name or shape mismatch).
    #[error("structural error: {0}")]
    Structure(String),

    /// A framework spec failed validation.
    #[error("invalid framework spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    /// A non-finite value appeared where finite math was required.
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
