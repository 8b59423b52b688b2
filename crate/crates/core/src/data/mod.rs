//! Dataset schema, vocabulary, synthetic generator and the user simulator.

mod record;
mod simulator;
mod synth;
mod vocab;

pub use record::{
    dataset_to_json, load_dataset, parse_dataset, save_dataset, DiagnosisRecord, LoadOptions,
    SymptomSet,
};
pub use simulator::{simulator_answer, simulator_answer_named, SimulatorAnswer};
pub use synth::{generate_synthetic, CountRange, DiseaseRow, GeneratorSpec, ImplicitOrder};
pub use vocab::{EncodedRecord, SymptomVocab};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown symptom \"{0}\"")]
    UnknownSymptom(String),
    #[error("unknown disease \"{0}\"")]
    UnknownDisease(String),
    #[error("generator spec: {0}")]
    GeneratorSpec(String),
}
