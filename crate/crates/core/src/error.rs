use std::path::PathBuf;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing checkpoint for stage `{stage}` at {path}")]
    MissingCheckpoint { stage: String, path: PathBuf },

    #[error("volume file {path}: {reason}")]
    Volume { path: PathBuf, reason: String },

    #[error("corrupt checkpoint or cache: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Hdf5(#[from] hdf5_metno::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_check(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}
