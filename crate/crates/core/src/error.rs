use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The recurrence overflowed; this is the observable state-explosion failure.
    #[error("state overflow at layer {layer}, step {step}")]
    StateOverflow { layer: usize, step: usize },

    #[error("sequence length {len} exceeds the materialization guard of {max}")]
    TooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: loss {loss} exceeded 10x the initial loss {initial} for {window} steps")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        window: usize,
    },

    #[error("calibration aborted at iteration {iteration}: {reason}")]
    CalibrationAborted { iteration: usize, reason: String },

    #[error("corpus too small: {required} tokens required, {available} available")]
    InsufficientCorpus { required: usize, available: usize },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for numeric failures (overflow, divergence, non-finite values).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::StateOverflow { .. }
                | Error::Diverged { .. }
                | Error::CalibrationAborted { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
