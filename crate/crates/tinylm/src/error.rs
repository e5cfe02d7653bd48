use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample too short: {len} tokens, need at least 2")]
    SampleTooShort { len: usize },
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("parameter vector has length {got}, config requires {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("vocabulary mismatch: student {student}, teacher {teacher}")]
    VocabMismatch { student: usize, teacher: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty training stream")]
    EmptyStream,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
