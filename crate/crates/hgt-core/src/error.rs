//! Error taxonomy shared across the toolkit.
//!
//! Categories map onto process exit codes at the CLI boundary:
//! configuration errors exit 2, data/ingestion errors exit 3, numeric
//! failures exit 4.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration, schema, or argument.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Operation called on a model state that cannot support it.
    #[error("state error: {0}")]
    State(String),

    /// Numeric failure (divergence, NaN, non-finite values).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::State(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
