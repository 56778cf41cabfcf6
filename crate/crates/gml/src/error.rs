//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum GmlError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite model parameter at index {0}")]
    NonFiniteModel(usize),
    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid generator spec for site {site}: {reason}")]
    InvalidSpec { site: String, reason: String },
    #[error("split too small: {0}")]
    SplitTooSmall(String),
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("need at least two sites (got {0})")]
    NoSites(usize),
    #[error("no training data")]
    NoData,
    #[error("incompatible models: {0}")]
    IncompatibleModels(String),
    #[error("mask is not binary: {0}")]
    NotBinary(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GmlError {
    /// Process exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            GmlError::BadConfig(_) | GmlError::InvalidConfig { .. } => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GmlError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, GmlError>;
