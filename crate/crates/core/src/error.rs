use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid difficulty {0}: expressions need at least 2 operands")]
    InvalidDifficulty(usize),
    #[error("invalid expression: {0}")]
    InvalidExpression(String),
    #[error("unknown token {token:?}{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Vocabulary { token: String, line: Option<usize> },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sequence of {requested} positions exceeds max_seq_len {max}")]
    Length { requested: usize, max: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
