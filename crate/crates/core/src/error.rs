use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backbone has no stage with side index {0}")]
    UnknownStage(usize),

    #[error("side tap selection is empty")]
    EmptySelection,

    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("unpaired dataset file: {0}")]
    UnpairedFile(PathBuf),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(
        "training diverged at iteration {iter}: non-finite loss; diagnostics written to {dump:?}"
    )]
    NonFiniteLoss { iter: usize, dump: Option<PathBuf> },

    #[error("export refused: {0}")]
    ExportRefused(String),

    #[error("missing head output: {0}")]
    MissingHeadOutput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
