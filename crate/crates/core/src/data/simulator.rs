use serde::{Deserialize, Serialize};

use super::{DiagnosisRecord, EncodedRecord, SymptomVocab};

/// Reply to a symptom inquiry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorAnswer {
    True,
    False,
    NotSure,
}

impl SimulatorAnswer {
    pub fn from_polarity(p: Option<bool>) -> Self {
        match p {
            Some(true) => Self::True,
            Some(false) => Self::False,
            None => Self::NotSure,
        }
    }

    /// The polarity carried by a True/False answer.
    pub fn polarity(self) -> Option<bool> {
        match self {
            Self::True => Some(true),
            Self::False => Some(false),
            Self::NotSure => None,
        }
    }
}

/// Rule-based patient: answers from the record's goal symptoms only.
pub fn simulator_answer(record: &EncodedRecord, symptom: usize) -> SimulatorAnswer {
    SimulatorAnswer::from_polarity(record.polarity(symptom))
}

/// Same as [`simulator_answer`] on an unencoded record.
pub fn simulator_answer_named(
    record: &DiagnosisRecord,
    vocab: &SymptomVocab,
    symptom: usize,
) -> SimulatorAnswer {
    let polarity = vocab
        .symptom_name(symptom)
        .and_then(|name| record.polarity(name));
    SimulatorAnswer::from_polarity(polarity)
}
