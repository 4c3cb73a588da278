use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("degenerate scatter: {0}")]
    DegenerateScatter(String),
    #[error("within-class scatter is singular; use a positive ridge")]
    SingularWithin,
    #[error("design matrix is identically zero")]
    ZeroDesign,
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("degenerate correlation: {0}")]
    DegenerateCorrelation(String),
    #[error("at least 3 classes are needed, got {0}")]
    InsufficientClasses(usize),
    #[error("noise cannot be estimated from a single trial")]
    NoNoiseEstimate,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::InvariantViolation(msg.into())
    }
}
