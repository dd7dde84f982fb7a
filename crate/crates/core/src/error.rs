use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config key `{key}`: {msg}")]
    InvalidConfig { key: String, msg: String },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("internal contract violated: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("missing file for sample {sample}: {}", path.display())]
    MissingSample { sample: String, path: PathBuf },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

pub(crate) fn bad_config<T>(key: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidConfig {
        key: key.to_string(),
        msg: msg.into(),
    })
}
