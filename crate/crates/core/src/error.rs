//! Error type shared by the whole crate.

use thiserror::Error;

/// Failure categories. The CLI maps each category to a stable exit code,
/// so variants are coarse by design; the message carries the detail.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad dimension, bad mode combo,
    /// out-of-range hyperparameter).
    #[error("config error: {0}")]
    Config(String),

    /// Data that is structurally fine but semantically unusable
    /// (non-finite feature, unknown id, mismatched record sets).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed serialized artifact (bad magic, truncated file,
    /// unparseable record).
    #[error("format error: {0}")]
    Format(String),

    /// Mathematically undefined request (zero-norm vector in a cosine,
    /// empty key set after masking).
    #[error("domain error: {0}")]
    Domain(String),

    /// A foreign interaction unit returned an unusable tensor.
    #[error("adapter error at refinement step {step}: {msg}")]
    Adapter { step: usize, msg: String },

    /// Training aborted (non-finite loss); the message names the dump
    /// written for post-mortem inspection.
    #[error("training error: {0}")]
    Training(String),

    /// The gradient audit found analytic/numeric disagreement.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
