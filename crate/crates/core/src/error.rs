use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed `{field}`: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(
        "trim cap {cap} is smaller than the number of non-empty instructions ({instructions})"
    )]
    TrimCap { cap: usize, instructions: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("every attention position is masked")]
    AllMasked,

    #[error("zero-norm vector has no cosine similarity")]
    ZeroNorm,

    #[error("label must be +1 or -1, got {0}")]
    InvalidLabel(i32),

    #[error("class id {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),

    #[error("cannot sample batch: {0}")]
    Sampling(String),

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error(
        "non-finite loss in epoch {epoch} ({stage}); parameters restored to the last finite state"
    )]
    NonFiniteLoss { epoch: usize, stage: String },

    #[error("unknown recipe id `{0}`")]
    UnknownRecipe(String),

    #[error("no image feature for `{0}`")]
    MissingFeature(String),

    #[error("recipe `{id}` rejected: {reason}")]
    Rejected { id: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
