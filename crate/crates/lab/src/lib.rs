//! File formats, experiment configuration and the end-to-end pipeline of the
//! probing lab. The numerical work lives in `plab-core`.

pub mod config;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod report;

use std::path::Path;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] plab_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {0}; run the earlier pipeline stage first")]
    Missing(String),
}

impl Error {
    pub(crate) fn at(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::Missing(path.display().to_string());
        }
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
