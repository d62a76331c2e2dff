use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown key {0:?}")]
    UnknownKey(char),

    #[error("invalid sentence {sentence:?}: {reason}")]
    InvalidSentence { sentence: String, reason: String },

    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    PathIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("training diverged: {term} is not finite at iteration {iteration}")]
    Diverged { term: String, iteration: u64 },

    #[error("missing ids: {0:?}")]
    MissingIds(Vec<String>),

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("stage {stage} failed (log: {}): {source}", log.display())]
    Stage {
        stage: String,
        log: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::PathIo { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
