use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("cannot sample a negative item for user {user}: every item is in their history")]
    Sampling { user: usize },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("cache error: {0}")]
    Cache(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
