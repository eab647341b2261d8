//! Error taxonomy shared by the whole crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape / dimension mismatch between tensors or layers.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A computation produced NaN/Inf or left a function's domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Argument outside its mathematical domain (e.g. temperature <= 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration (method fields, projector dims, schedules).
    #[error("configuration error: {0}")]
    Config(String),

    /// A network spec cannot be materialized.
    #[error("build error: {0}")]
    Build(String),

    /// API misuse (stale cache, mismatched parameter collections).
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad input data (empty dataset, malformed labels).
    #[error("input error: {0}")]
    Input(String),

    /// A file failed its integrity checks.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn build(msg: impl Into<String>) -> Self {
        Error::Build(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
}
