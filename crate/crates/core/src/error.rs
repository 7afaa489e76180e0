use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input {height}x{width} is not divisible by 32; pad to {padded_height}x{padded_width}")]
    NotDivisible {
        height: usize,
        width: usize,
        padded_height: usize,
        padded_width: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}: expected {expected} channel(s), found {found}")]
    Channels {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image {image_width}x{image_height} and mask {mask_width}x{mask_height} differ in shape")]
    PairShape {
        image_width: usize,
        image_height: usize,
        mask_width: usize,
        mask_height: usize,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{segments} ground-truth segments exceed {queries} queries; raise num_queries")]
    TooManySegments { segments: usize, queries: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
