use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("mask shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),

    #[error("negative area {0}")]
    NegativeArea(f64),

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("expected {expected} decoder stages, got {got}")]
    StageCount { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image size {height}x{width} is not divisible by the encoder stride {stride}; pad to {padded_height}x{padded_width}")]
    ImageSize {
        height: usize,
        width: usize,
        stride: usize,
        padded_height: usize,
        padded_width: usize,
    },

    #[error("annotation record {index}: {message}")]
    Annotation { index: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss at step {step} (batch saved to {replay:?})")]
    NonFiniteLoss { step: usize, replay: Option<PathBuf> },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("{path}: {error}")]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error: source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
