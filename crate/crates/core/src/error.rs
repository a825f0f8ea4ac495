use thiserror::Error;

use crate::corpus::CorpusError;
use crate::privacy::PrivacyError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),

    #[error(transparent)]
    Privacy(#[from] PrivacyError),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("all sampling masses are nonpositive")]
    Degenerate,

    #[error("corpus has no tokens")]
    EmptyCorpus,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
