use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{param}`; step rejected")]
    NonFiniteGrad { param: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("sample generation failed for seed {seed}: {detail}")]
    Generation { seed: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    /// True when the error stems from bad input rather than a broken invariant.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::NonFiniteGrad { .. } | Error::Contract(_))
    }
}
