use std::path::PathBuf;

use thiserror::Error;

use crate::chunker::BudgetError;
use crate::infer::BackendError;
use crate::linkex::LinkError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}{}: {message}", record.map(|i| format!(" (record {i})")).unwrap_or_default())]
    Json {
        path: PathBuf,
        record: Option<usize>,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("sqlite error on {path}: {message}")]
    Database { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error(transparent)]
    Link(#[from] LinkError),

    #[error(transparent)]
    Budget(#[from] BudgetError),

    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
