use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model build error in block {block}: {reason}")]
    Build { block: usize, reason: String },

    #[error("architecture mismatch at {layer}: {reason}")]
    Architecture { layer: String, reason: String },

    #[error("missing gradient for trainable tensor `{0}`")]
    MissingGrad(String),

    #[error("cannot prune all {0} channels")]
    PruneAll(usize),

    #[error("client {client} diverged: {reason}")]
    Diverged { client: usize, reason: String },

    #[error("round {0}: every sampled client failed")]
    AllClientsFailed(usize),

    #[error("dataset generation error: {0}")]
    Generation(String),

    #[error("line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
