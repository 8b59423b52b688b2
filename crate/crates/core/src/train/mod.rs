//! Orderless training: sequence shuffle, synchronous labels, repeated
//! segments, and the optimization loop.

mod fit;
mod sequence;

pub use fit::{fit, train_epoch, EpochMetrics, FitReport, TrainConfig};
pub use sequence::{build_repeated_sequences, build_sync_labels, make_sequence, shuffle_sequence};

use thiserror::Error;

use crate::infer::InferError;
use crate::net::NetError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step} (records {records:?})")]
    NonFinite {
        step: usize,
        loss: f64,
        records: Vec<usize>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Infer(#[from] InferError),
}
