use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Encoding { path: PathBuf, offset: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("alignment error: source has {src} documents, target has {tgt}")]
    DocumentCount { src: usize, tgt: usize },

    #[error("alignment error: document {doc} has {src} source sentences but {tgt} target sentences")]
    SentenceCount { doc: usize, src: usize, tgt: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("non-finite value in {location}")]
    Numeric { location: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {0}")]
    Missing(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures (bad input data or configuration) as opposed to
    /// runtime failures (I/O, numerics).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Numeric { .. })
    }
}
