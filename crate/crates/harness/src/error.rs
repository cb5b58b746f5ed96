use std::path::{Path, PathBuf};

use made_core::CoreError;
use made_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing artifact {0} (run the training subcommands or set output.train_missing)")]
    MissingArtifact(PathBuf),
    #[error("artifacts in {dir} were built from config {found}, expected {expected}")]
    HashMismatch {
        dir: PathBuf,
        expected: String,
        found: String,
    },
    #[error("serialization: {0}")]
    Serde(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        Self::Serde(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        Self::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
