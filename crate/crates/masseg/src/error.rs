use thiserror::Error;

#[derive(Debug, Error)]
pub enum MassegError {
    #[error("shape contract violation: {0}")]
    ShapeMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("i/o error at {path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    StdIo(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MassegError>;
