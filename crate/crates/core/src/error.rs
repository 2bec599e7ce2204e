use thiserror::Error;

use crate::tensor::AccountingError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("weight file error: {0}")]
    Weights(String),
    #[error("checksum mismatch in {path}: manifest says {expected}, blob hashes to {actual}")]
    Checksum {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("unknown {kind} `{name}` (known: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("already registered: {0}")]
    Duplicate(String),
    #[error("missing required input `{0}`")]
    MissingInput(&'static str),
    #[error("image codec error: {0}")]
    Image(String),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn unknown(kind: &'static str, name: &str, known: impl IntoIterator<Item = impl AsRef<str>>) -> Error {
    let known: Vec<String> = known.into_iter().map(|k| k.as_ref().to_string()).collect();
    Error::Unknown {
        kind,
        name: name.to_string(),
        known: known.join(", "),
    }
}
