use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dense map: {0}")]
    InvalidMap(String),

    #[error("part index {index} out of range 1..={max}")]
    InvalidPart { index: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown part group `{0}`")]
    UnknownGroup(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite {term} loss at step {step}")]
    Diverged { term: &'static str, step: u64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Stable machine-readable class name, used by the CLI error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidMap(_) => "invalid-map",
            Error::InvalidPart { .. } => "invalid-part",
            Error::Shape(_) => "shape-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::UnknownGroup(_) => "invalid-part-group",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::Config(_) => "invalid-config",
            Error::Dataset(_) => "dataset",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Image { .. } => "image-io",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "not-found",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
