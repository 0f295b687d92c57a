use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("particle {index} lies outside the simulation domain")]
    Domain { index: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("incompatible weights: {0}")]
    Incompatible(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("controller produced a non-finite acceleration at control step {step}")]
    NonFiniteField { step: usize },
    #[error("degenerate sketch: {0}")]
    DegenerateSketch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
