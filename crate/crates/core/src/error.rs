use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("k-means needs at least {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("no valid points to build a map from")]
    NoValidPoints,

    #[error("observation source: {0}")]
    Source(String),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("map archive: {0}")]
    Archive(String),

    #[error("trajectory mismatch: {0}")]
    TrajectoryMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}
