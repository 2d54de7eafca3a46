use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed safetensors header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("non-finite value in tensor {name:?} at element {index}")]
    NonFiniteValue { name: String, index: usize },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("tensor {name:?} has {len} values but shape {shape:?} implies {expected}")]
    ValueCount {
        name: String,
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("shape mismatch for {name:?}: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor {0:?} is missing")]
    MissingTensor(String),

    #[error("drop rate {0} is outside the valid range")]
    InvalidRate(f64),

    #[error("window {window} is invalid for drop rate {p}")]
    InvalidWindow { p: f64, window: f64 },

    #[error("product-sign bias requires a gradient")]
    MissingGradient,

    #[error("scale factor must be positive, got {0}")]
    InvalidFactor(f64),

    #[error("spread must be non-negative and finite, got {0}")]
    InvalidSpread(f64),

    #[error("block count must be at least 1, got {0}")]
    InvalidBlockCount(usize),

    #[error("tensor {name:?} with shape {shape:?} is not a matrix")]
    NotAMatrix { name: String, shape: Vec<usize> },

    #[error("rank {rank} out of range 1..={max} for tensor {name:?}")]
    RankOutOfRange { name: String, rank: usize, max: usize },

    #[error("keep fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),

    #[error("alpha {0} <= -1 requires an explicit override")]
    AlphaOutOfRange(f64),

    #[error("invalid probe spec: {0}")]
    InvalidSpec(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("training diverged at step {step}")]
    DivergedTraining { step: usize },

    #[error("subdivision count must satisfy C >= 1 (C >= 2 without the left endpoint), got {0}")]
    InvalidC(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Filesystem failures, as opposed to invalid input.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}
