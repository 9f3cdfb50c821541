use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive received operands whose shapes do not conform.
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("class index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("invalid time span: start {start} > end {end}")]
    InvalidSpan { start: u64, end: u64 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{kind} id {id} out of range (limit {limit})")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        limit: usize,
    },

    #[error("timestamp {time} is not after the last encoded timestamp {last}")]
    NonIncreasingTime { time: usize, last: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code for the error family.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::InvalidTensor(_) => "E_TENSOR",
            Error::NonScalarLoss(_) => "E_NON_SCALAR",
            Error::TargetOutOfRange { .. } => "E_TARGET",
            Error::NonFiniteGradient(_) | Error::NonFinite(_) => "E_NON_FINITE",
            Error::Parse { .. } => "E_PARSE",
            Error::InvalidSpan { .. } => "E_SPAN",
            Error::Dataset(_) => "E_DATASET",
            Error::Config(_) => "E_CONFIG",
            Error::IdOutOfRange { .. } => "E_ID_RANGE",
            Error::NonIncreasingTime { .. } => "E_TIME_ORDER",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
