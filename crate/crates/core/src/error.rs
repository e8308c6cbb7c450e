use thiserror::Error;

/// Errors raised by the tensor, convolution and training routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("invalid sample point ({0}, {1})")]
    InvalidSamplePoint(f64, f64),

    #[error("invalid kernel spec: {0}")]
    InvalidKernel(String),

    #[error("snippet too short: temporal extent {extent} < kernel {kernel}")]
    SnippetTooShort { extent: usize, kernel: usize },

    #[error("offset learner must emit {expected} channels, got {actual}")]
    OffsetChannels { expected: usize, actual: usize },

    #[error("proposition hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}
