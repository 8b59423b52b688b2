//! The symptom attention framework.

mod checkpoint;
mod config;
mod layout;
mod model;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use layout::{
    build_attention_mask, build_input, segment_labels, sync_labels, LabelMode, ModelInput, Slot,
    StateId, TrainingSequence, TypeId,
};
pub use model::{Diaformer, ForwardOutput, LossParts, INIT_STD};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("config error: {0}")]
    Config(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
