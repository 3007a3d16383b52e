use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("corrupt matrix file {path}: {reason}")]
    CorruptMatrix { path: PathBuf, reason: String },

    #[error("dimension mismatch in {path}: expected d={expected}, found d={found}")]
    DimensionMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("label {label} out of range (num_classes={num_classes}) in {context}")]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        context: String,
    },

    #[error("row {0} is the zero vector and cannot be normalized")]
    ZeroRow(usize),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("graph is disconnected")]
    Disconnected,

    #[error("graph has no edges")]
    Edgeless,

    #[error("too large for the oracle: {0}")]
    OracleTooLarge(String),

    #[error("transport masses differ by {0:e}")]
    MassMismatch(f64),

    #[error("triangle count {count} exceeds cap {cap}; use a smaller per-class sample")]
    TooManyTriangles { count: usize, cap: usize },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("objective diverged ({initial:e} -> {current:e}); use a smaller step size")]
    Diverged { initial: f64, current: f64 },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("missing ood_accuracy for family {0}; ground truth is required for evaluation")]
    MissingGroundTruth(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
