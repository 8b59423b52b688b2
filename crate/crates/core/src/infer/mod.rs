//! Thresholded inquiry loop, diagnosis and evaluation metrics.

mod baseline;
mod dialogue;
mod eval;

pub use baseline::{explicit_only_baseline, full_information_oracle, LinearClassifier};
pub use dialogue::{
    diagnose, next_inquiry_distribution, run_dialogue, AnswerSource, Diagnosis, Dialogue,
    DialogueState, InferenceConfig, Inquiry, RecordSimulator, Step, StopReason,
};
pub use eval::{evaluate, evaluate_agent, Agent, EvalMetrics, ModelAgent};

use thiserror::Error;

use crate::net::NetError;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("symptom id {id} outside vocabulary of {size}")]
    UnknownSymptom { id: usize, size: usize },
    #[error("dialogue already finished")]
    Finished,
    #[error("no question pending")]
    NoPendingQuestion,
    #[error(transparent)]
    Net(#[from] NetError),
}
