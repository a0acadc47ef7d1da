use thiserror::Error;

/// Errors produced by the NIMC library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NimcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("{0} is rank deficient (smallest singular value {1:e})")]
    RankDeficient(&'static str, f64),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("value {value} outside attainable range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),
}

impl From<std::io::Error> for NimcError {
    fn from(e: std::io::Error) -> Self {
        NimcError::Io(e.to_string())
    }
}

pub type Result<T, E = NimcError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(NimcError::InvalidArgument(msg.into()))
}
