use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure surfaced by the library falls into one of these categories.
/// The CLI maps each category onto a distinct exit status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Ingestion(_) => 4,
            Error::Numeric(_) => 5,
            Error::Io { .. } => 6,
            Error::Incompatible(_) => 7,
            Error::Contract(_) | Error::Evaluation(_) => 1,
        }
    }
}
