use thiserror::Error;

#[derive(Error, Debug)]
pub enum SlotError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scene placement failed after {retries} retries (seed {seed})")]
    Placement { seed: u64, retries: usize },
    #[error("dataset error at {path}: {msg}")]
    Dataset { path: String, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training aborted at step {step}: {msg} (last good checkpoint: {last_checkpoint:?})")]
    TrainAbort {
        step: usize,
        msg: String,
        last_checkpoint: Option<String>,
    },
}

pub type Result<T> = std::result::Result<T, SlotError>;
