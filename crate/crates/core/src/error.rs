use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("certification error: {0}")]
    Certification(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("simulation domain fault: {0}")]
    Domain(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}
