use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("degenerate point cloud: all points coincide")]
    DegenerateCloud,

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("point {index} lies outside the canonical cube (|coord| = {value:.4})")]
    OutsideCanonical { index: usize, value: f64 },

    #[error("rotation is not orthonormal with det +1 (error {error:.3e})")]
    NotOrthonormal { error: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite loss term `{term}` at step {step}")]
    Diverged { term: &'static str, step: u64 },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("{path}: row {row}: {reason}")]
    BadRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("config: missing required key `{0}`")]
    MissingKey(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
