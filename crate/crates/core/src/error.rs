use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the crdnet library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward called on a non-scalar root of shape {0:?}")]
    NonScalarRoot([usize; 4]),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds { x: f64, y: f64, width: usize, height: usize },

    #[error("level {level} cannot be pretrained before coarser level {missing}")]
    CoarserLevelUntrained { level: usize, missing: usize },

    #[error("training diverged at step {step}: loss is {value}")]
    Diverged { step: usize, value: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error in {context}: {detail}")]
    Parse { context: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse { context: context.into(), detail: detail.into() }
    }
}
