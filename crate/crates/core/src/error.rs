use std::path::PathBuf;

use noiseproj_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible world: prompt {prompt_id} cannot satisfy tokens {tokens:?} at once")]
    InfeasiblePredicates { prompt_id: usize, tokens: Vec<usize> },

    #[error("diffusion step {step} out of range (schedule has {steps} steps)")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("noise prediction is undefined at t = 0")]
    ZeroNoiseLevel,

    #[error("non-finite value {context}")]
    NonFinite { context: String },

    #[error("sampling failed for seed {seed}, prompt {prompt_id}: {source}")]
    Sampling {
        seed: u64,
        prompt_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown prompt {0}")]
    UnknownPrompt(usize),

    #[error("unknown token {0}")]
    UnknownToken(usize),

    #[error("{0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("reward model changed after freezing (expected {expected}, found {found})")]
    FrozenHashMismatch { expected: String, found: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config hash mismatch: checkpoint was written for {stored}, current config is {current}")]
    ConfigHashMismatch { stored: String, current: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
