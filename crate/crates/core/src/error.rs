use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: left has dimension {left}, right has dimension {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid parameters for family `{family}`: {reason}")]
    InvalidParams { family: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("potential undefined at point {0:?}")]
    UndefinedPotential(Vec<f64>),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn params(family: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParams {
            family: family.to_string(),
            reason: reason.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse(format!("{other:?}")),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Parse(e.to_string())
        }
    }
}
