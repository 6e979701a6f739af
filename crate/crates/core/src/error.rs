use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error in field `{field}` at byte {offset}: {message}")]
    Parse {
        field: &'static str,
        offset: usize,
        message: String,
    },
    #[error("unmapped {space} action kind `{kind}`")]
    Unmapped { space: String, kind: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("sequence error: {0}")]
    Sequence(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("alignment error: expected {expected} items, got {actual}")]
    Alignment { expected: usize, actual: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad input rather than a bug or I/O failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Numeric(_))
    }
}
