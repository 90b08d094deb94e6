use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("context overflow: {needed} positions requested, max context is {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing exit state for position {0}")]
    MissingExitState(usize),

    #[error("inconsistent cache: {0}")]
    Cache(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint {path}: {reason} (at byte offset {offset})")]
    Checkpoint {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
