use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("overlapping offsets between tensors {first} and {second}")]
    OverlappingOffsets { first: String, second: String },

    #[error("truncated payload: tensor {name} needs bytes up to {needed}, payload has {available}")]
    TruncatedPayload {
        name: String,
        needed: u64,
        available: u64,
    },

    #[error("non-contiguous payload: {0}")]
    NonContiguous(String),

    #[error("non-finite value in tensor {0}")]
    NonFinite(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("shape mismatch at {name}: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty task-vector list")]
    EmptySum,

    #[error("zero-norm task vector")]
    ZeroNorm,

    #[error("architecture mismatch: checkpoint digest {checkpoint}, spec digest {spec}")]
    ArchMismatch { checkpoint: String, spec: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing head: {0}")]
    MissingHead(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("step {step} out of range for a {steps}-step run")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("missing control metric in sweep row {0}")]
    MissingControl(usize),

    #[error("evaluation failed at coefficients {coeffs:?}: {source}")]
    Evaluation {
        coeffs: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("training failed for task {task}: {source}")]
    Training {
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised because two weight sets do not share names/shapes.
    pub fn is_compat(&self) -> bool {
        matches!(self, Error::MissingTensor(_) | Error::ShapeMismatch { .. })
    }
}
