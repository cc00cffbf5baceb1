use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the training, augmentation and benchmarking code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("backbone `{0}` is already registered")]
    DuplicateBackbone(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing file `{}`", .0.display())]
    MissingFile(PathBuf),

    #[error("cannot decode image `{}`: {reason}", .path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("throughput lock `{}` is held by another process", .0.display())]
    LockHeld(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
