use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("graph validation failed: {0}")]
    Validation(String),

    #[error("graph contains a cycle through node '{0}'")]
    Cycle(String),

    #[error("missing weights for node '{id}' ({tensor})")]
    MissingWeights { id: String, tensor: &'static str },

    #[error("trace error: {0}")]
    Trace(String),

    #[error("expected {expected} parameters, got {actual}")]
    ParamLength { expected: usize, actual: usize },

    #[error("empty mask")]
    EmptyMask,

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
