use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("record {index}: {reason}")]
    Schema { index: usize, reason: String },
    #[error("invalid sentence: {0}")]
    InvalidSentence(String),
    #[error("word {0:?} is not in the script map")]
    OutOfVocabulary(String),
    #[error("malformed dependency parse: {0}")]
    MalformedParse(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("vocabulary size {requested} is below the {minimum} base symbols")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("token id {0} is out of range")]
    InvalidTokenId(u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input (exit code 2) rather than a
    /// failure while running (exit code 3).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Malformed { .. }
                | Error::Schema { .. }
                | Error::Config(_)
                | Error::VocabTooSmall { .. }
                | Error::MalformedParse(_)
        )
    }
}
