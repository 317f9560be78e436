use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("guidance shape mismatch at scale {scale}: expected {expected:?}, got {got:?}")]
    GuidanceShape { scale: usize, expected: [usize; 4], got: [usize; 4] },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("frozen base parameter changed: {0}")]
    FrozenViolation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
