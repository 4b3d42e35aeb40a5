use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("series diverged: {0}; retry with a smaller scale")]
    Divergence(String),

    #[error("unsupported loss for this operation: {0}")]
    UnsupportedLoss(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
