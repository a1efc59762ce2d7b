use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("schema error in sequence `{sequence}`: {message}")]
    Schema { sequence: String, message: String },

    #[error("sequence `{sequence}` has a gap at frame {frame}")]
    Gap { sequence: String, frame: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {diagnostic}")]
    NonFinite { epoch: usize, batch: usize, diagnostic: String },

    #[error("unsupported checkpoint format version {0}")]
    Version(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }
}
