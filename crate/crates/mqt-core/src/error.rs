use thiserror::Error;

/// Errors surfaced by the tensor engine, model code, and experiment plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid budget {budget}: must be in 1..={max}")]
    Budget { budget: usize, max: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by user-supplied configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Budget { .. })
    }
}
