use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid range: lo {lo} must be below hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint fingerprint {found} does not match config fingerprint {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("non-finite {what} at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    Diverged { what: &'static str, step: u64, lr: f64, grad_norm: f64 },

    #[error("sampler produced non-finite values at step {step}")]
    SamplerNonFinite { step: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
