use thiserror::Error;

/// Error categories surfaced by the library. The CLI maps each variant to a
/// distinct process exit code.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shape / dimension mismatch.
    #[error("dimension error: {0}")]
    Dim(String),
    /// Invalid or inconsistent configuration; message carries the field path.
    #[error("config error: {0}")]
    Config(String),
    /// API misuse (e.g. k > N, backward on a non-scalar, missing gradient).
    #[error("usage error: {0}")]
    Usage(String),
    /// Bad input data (labels out of range, misaligned modalities, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Corrupt or incompatible on-disk formats (checkpoints, datasets).
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
