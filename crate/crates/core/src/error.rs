use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite weight at index {0}")]
    NonFiniteWeight(usize),
    #[error("invalid dither at index {index}: {value} outside [-{half_step}, {half_step}]")]
    InvalidDither { index: usize, value: f64, half_step: f64 },
    #[error("invalid quantizer spec: {0}")]
    InvalidSpec(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("zero excitation in group {0}")]
    ZeroExcitation(usize),
    #[error("sample index {index} out of range (n = {n})")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("empty index set")]
    EmptyBatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("VR state missing: {0}")]
    MissingState(&'static str),
    #[error("diverged at step {step}: loss {loss} exceeds {threshold}")]
    Diverged { step: usize, loss: f64, threshold: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
