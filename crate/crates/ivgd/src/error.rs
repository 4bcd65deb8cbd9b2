use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the
/// pipeline distinguishes: bad input text, bad arguments, numeric
/// breakdown, refused inversion, versioned-format mismatch, training
/// failure, and undefined metrics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invertibility error: {0}")]
    Invertibility(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
