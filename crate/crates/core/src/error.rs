use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AdError;
use crate::specialmath::MathError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Math(#[from] MathError),

    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite state while integrating at t = {time}")]
    Integration { time: f64 },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("cannot normalize {column}: constant column (min = max = {value})")]
    Normalization { column: String, value: f64 },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
