use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, too small to normalize")]
    ZeroVector { row: usize, norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("label {label} is out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid margin {0}: must lie in [0, pi/2)")]
    InvalidMargin(f64),

    #[error("invalid scale {0}: must be positive and finite")]
    InvalidScale(f64),

    #[error("invalid epsilon {0}: must lie in (0, 0.5]")]
    InvalidEpsilon(f64),

    #[error("batch yields no positive pairs")]
    NoPositives,

    #[error("batch yields no negative pairs")]
    NoNegatives,

    #[error("loss {0} requires class weights")]
    MissingWeights(&'static str),

    #[error("perturbing coordinate {coordinate} left the loss domain: {source}")]
    PerturbationOutOfDomain {
        coordinate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no pairs to verify")]
    EmptyPairs,

    #[error("pair set holds only one class; ROC undefined (accuracy {accuracy}, threshold {threshold})")]
    OneClassOnly { accuracy: f64, threshold: f64 },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
