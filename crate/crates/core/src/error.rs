use std::path::PathBuf;

use thiserror::Error;

use crate::metric_stats::ClassId;

pub type Result<T> = std::result::Result<T, OwrError>;

#[derive(Debug, Error)]
pub enum OwrError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no usable class centroids")]
    NoUsableCentroids,

    #[error("class {0} is not among the known classes")]
    UnknownClass(ClassId),

    #[error("label {label} is outside the classes of step {step}")]
    LabelOutsideStep { label: ClassId, step: usize },

    #[error("negative threshold {value} for class position {index}")]
    NegativeThreshold { index: usize, value: f64 },

    #[error("missing threshold for class {0}")]
    MissingThreshold(ClassId),

    #[error("activation cache does not belong to this extractor state")]
    StaleCache,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("training diverged at step {step}, epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        step: usize,
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OwrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OwrError::Io {
            path: path.into(),
            source,
        }
    }
}
