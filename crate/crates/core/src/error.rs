use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown operation kind `{0}`")]
    UnknownOp(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate schedule: stages {a} and {b} have the same size {size:?}")]
    DegenerateSchedule {
        a: usize,
        b: usize,
        size: (usize, usize),
    },

    #[error("stage {stage} out of range (model has {available} stages)")]
    StageOutOfRange { stage: usize, available: usize },

    #[error("non-finite {what} at stage {stage}, iteration {iteration}")]
    NonFiniteLoss {
        what: &'static str,
        stage: usize,
        iteration: usize,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("external tool `{0}` is not installed")]
    ToolNotInstalled(String),

    #[error("`{tool}` did not print a single number: {output:?}")]
    ToolOutput { tool: String, output: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

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
