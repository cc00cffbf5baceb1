use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: refusing to overwrite existing output (pass --overwrite)")]
    WouldClobber { path: PathBuf },
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("conformance failed: {0}")]
    Conformance(String),
    #[error(transparent)]
    Core(calmix_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl From<calmix_core::Error> for CliError {
    fn from(e: calmix_core::Error) -> Self {
        match e {
            calmix_core::Error::Diverged(msg) => CliError::Diverged(msg),
            calmix_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 0 ok, 1 runtime failure, 2 usage or configuration, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::WouldClobber { .. } => 2,
            CliError::Core(calmix_core::Error::UnknownBackbone(_)) => 2,
            CliError::Diverged(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
