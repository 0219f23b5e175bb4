use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("optimizer step aborted: non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("sequence too long for {task}: {len} tokens exceeds maximum {max}")]
    SequenceTooLong {
        task: &'static str,
        len: usize,
        max: usize,
    },

    #[error("bbox sequence overflow: box {index} does not fit within {max} tokens")]
    BboxOverflow { index: usize, max: usize },

    #[error("content count mismatch: {placeholders} non-empty cells but {contents} contents")]
    CountMismatch {
        placeholders: usize,
        contents: usize,
    },

    #[error("html parse error at byte {pos}: {msg}")]
    HtmlParse { pos: usize, msg: String },

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Diverged { step: usize, loss: f32, limit: f32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
