use std::path::PathBuf;

use deal_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DealError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid text input: {0}")]
    Text(String),
    #[error("{path}: parse error at line {line}, column {column}: {msg}")]
    ConceptParse {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("category {category:?}: {msg}")]
    ConceptValidation { category: String, msg: String },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error("checksum mismatch for {file}: manifest {expected:016x}, computed {actual:016x}")]
    Checksum { file: String, expected: u64, actual: u64 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite {what}")]
    NonFinite { what: String },
}

impl DealError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DealError {
        let path = path.into();
        move |source| DealError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, DealError>;
