use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("volume generation failed: {0}")]
    Generation(String),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("training diverged at step {step} (volume {volume}, slice {slice}): {detail}")]
    Diverged {
        step: u64,
        volume: String,
        slice: usize,
        detail: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
