use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_dialogue, DialogueState, InferError, InferenceConfig, RecordSimulator};
use crate::data::{EncodedRecord, SymptomVocab};
use crate::net::Diaformer;
use crate::tensor::Float;

/// Anything that can hold a dialogue with a simulated patient.
pub trait Agent: Sync {
    fn run(&self, record: &EncodedRecord) -> Result<DialogueState, InferError>;
}

pub struct ModelAgent<'a> {
    pub model: &'a Diaformer,
    pub vocab: &'a SymptomVocab,
    pub config: InferenceConfig,
}

impl Agent for ModelAgent<'_> {
    fn run(&self, record: &EncodedRecord) -> Result<DialogueState, InferError> {
        run_dialogue(
            &record.explicit,
            &mut RecordSimulator(record),
            self.model,
            self.vocab,
            &self.config,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub dacc: Float,
    pub srec: Float,
    pub aturn: Float,
    pub n_records: usize,
    pub stop_reason_histogram: BTreeMap<String, usize>,
}

/// Fraction of the record's implicit symptoms that were acquired.
fn symptom_recall(record: &EncodedRecord, state: &DialogueState) -> Float {
    if record.implicit.is_empty() {
        return 1.0;
    }
    let hits = record
        .implicit
        .iter()
        .filter(|(s, _)| state.acquired.iter().any(|(a, _)| a == s))
        .count();
    hits as Float / record.implicit.len() as Float
}

/// Runs `agent` on every record in parallel and aggregates in record order.
pub fn evaluate_agent<A: Agent>(agent: &A, records: &[EncodedRecord]) -> Result<EvalMetrics, InferError> {
    if records.is_empty() {
        return Err(InferError::InvalidArgument("empty test set".into()));
    }
    let states: Vec<DialogueState> = records
        .par_iter()
        .map(|r| agent.run(r))
        .collect::<Result<_, _>>()?;
    let n = records.len() as Float;
    let mut correct = 0usize;
    let mut srec = 0.0;
    let mut turns = 0usize;
    let mut hist = BTreeMap::new();
    for (r, st) in records.iter().zip(&states) {
        if st.diagnosis.as_ref().is_some_and(|d| d.disease == r.disease) {
            correct += 1;
        }
        srec += symptom_recall(r, st);
        turns += st.turns;
        let key = st.stop_reason.map_or("None", |s| s.as_str());
        *hist.entry(key.to_string()).or_insert(0) += 1;
    }
    Ok(EvalMetrics {
        dacc: correct as Float / n,
        srec: srec / n,
        aturn: turns as Float / n,
        n_records: records.len(),
        stop_reason_histogram: hist,
    })
}

pub fn evaluate(
    model: &Diaformer,
    vocab: &SymptomVocab,
    records: &[EncodedRecord],
    config: &InferenceConfig,
) -> Result<EvalMetrics, InferError> {
    config.validate()?;
    let agent = ModelAgent {
        model,
        vocab,
        config: *config,
    };
    evaluate_agent(&agent, records)
}
