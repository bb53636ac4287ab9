use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter `{field}`: {reason}")]
    Param { field: &'static str, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient for `{path}` at index {index}")]
    NonFiniteGradient { path: String, index: usize },

    #[error("non-finite loss at step {step} (last good checkpoint: {last_checkpoint:?})")]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("parse error in {source_name} at byte {offset}: {reason}")]
    Parse {
        source_name: String,
        offset: usize,
        reason: String,
    },

    #[error("missing key `{key}` in {source_name}")]
    MissingKey { key: String, source_name: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn param_err<T>(field: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Param {
        field,
        reason: reason.into(),
    })
}
