use std::path::PathBuf;

use gradcore::GradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("generator: {0}")]
    Generator(String),

    /// A stored artifact does not match its manifest; `field` names the
    /// offending manifest entry or file.
    #[error("{field}: {detail}")]
    Format { field: String, detail: String },

    #[error("dataset: {0}")]
    Dataset(String),

    /// An artifact an earlier command should have produced is absent.
    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("classifier must be frozen")]
    NotFrozen,

    #[error("training aborted: {0}")]
    Training(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
