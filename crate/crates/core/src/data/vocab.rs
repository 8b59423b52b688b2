use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, DiagnosisRecord};

/// Symptom and disease ids.
///
/// Symptoms occupy ids `0..n_symptoms`, shared between the token table and
/// the inquiry classes. The inquiry class `n_symptoms` is END. In the token
/// table `n_symptoms` is the `[S]` token and `n_symptoms + 1` is `[D]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct SymptomVocab {
    symptoms: Vec<String>,
    diseases: Vec<String>,
    symptom_index: HashMap<String, usize>,
    disease_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    symptoms: Vec<String>,
    diseases: Vec<String>,
}

impl From<VocabFile> for SymptomVocab {
    fn from(f: VocabFile) -> Self {
        Self::from_names(f.symptoms, f.diseases)
    }
}

impl From<SymptomVocab> for VocabFile {
    fn from(v: SymptomVocab) -> Self {
        VocabFile {
            symptoms: v.symptoms,
            diseases: v.diseases,
        }
    }
}

impl PartialEq for SymptomVocab {
    fn eq(&self, other: &Self) -> bool {
        self.symptoms == other.symptoms && self.diseases == other.diseases
    }
}

impl SymptomVocab {
    /// Ids follow the given order.
    pub fn from_names(symptoms: Vec<String>, diseases: Vec<String>) -> Self {
        let symptom_index = symptoms
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let disease_index = diseases
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            symptoms,
            diseases,
            symptom_index,
            disease_index,
        }
    }

    /// Every symptom and disease seen in `records`, sorted by name.
    pub fn build(records: &[DiagnosisRecord]) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut symptoms = BTreeSet::new();
        let mut diseases = BTreeSet::new();
        for r in records {
            symptoms.extend(r.explicit.names().map(str::to_owned));
            symptoms.extend(r.implicit.names().map(str::to_owned));
            diseases.insert(r.disease.clone());
        }
        Ok(Self::from_names(
            symptoms.into_iter().collect(),
            diseases.into_iter().collect(),
        ))
    }

    pub fn n_symptoms(&self) -> usize {
        self.symptoms.len()
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    /// Number of inquiry classes: every symptom plus END.
    pub fn c_inq(&self) -> usize {
        self.symptoms.len() + 1
    }

    pub fn c_dis(&self) -> usize {
        self.diseases.len()
    }

    pub fn end_class(&self) -> usize {
        self.symptoms.len()
    }

    pub fn s_token(&self) -> usize {
        self.symptoms.len()
    }

    pub fn d_token(&self) -> usize {
        self.symptoms.len() + 1
    }

    pub fn token_table_size(&self) -> usize {
        self.symptoms.len() + 2
    }

    pub fn symptom_id(&self, name: &str) -> Option<usize> {
        self.symptom_index.get(name).copied()
    }

    pub fn disease_id(&self, name: &str) -> Option<usize> {
        self.disease_index.get(name).copied()
    }

    pub fn symptom_name(&self, id: usize) -> Option<&str> {
        self.symptoms.get(id).map(String::as_str)
    }

    pub fn disease_name(&self, id: usize) -> Option<&str> {
        self.diseases.get(id).map(String::as_str)
    }

    pub fn symptoms(&self) -> &[String] {
        &self.symptoms
    }

    pub fn diseases(&self) -> &[String] {
        &self.diseases
    }

    /// Resolves names to ids.
    pub fn encode(&self, record: &DiagnosisRecord) -> Result<EncodedRecord, DataError> {
        let lookup = |name: &str| {
            self.symptom_id(name)
                .ok_or_else(|| DataError::UnknownSymptom(name.to_owned()))
        };
        Ok(EncodedRecord {
            explicit: record
                .explicit
                .iter()
                .map(|(n, v)| Ok((lookup(n)?, v)))
                .collect::<Result<_, DataError>>()?,
            implicit: record
                .implicit
                .iter()
                .map(|(n, v)| Ok((lookup(n)?, v)))
                .collect::<Result<_, DataError>>()?,
            disease: self
                .disease_id(&record.disease)
                .ok_or_else(|| DataError::UnknownDisease(record.disease.clone()))?,
        })
    }

    pub fn encode_all(&self, records: &[DiagnosisRecord]) -> Result<Vec<EncodedRecord>, DataError> {
        records.iter().map(|r| self.encode(r)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("vocab serializes");
        fs::write(path, json).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| DataError::Json(e.to_string()))
    }
}

/// A record with symptom and disease names resolved to ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRecord {
    pub explicit: Vec<(usize, bool)>,
    pub implicit: Vec<(usize, bool)>,
    pub disease: usize,
}

impl EncodedRecord {
    pub fn polarity(&self, symptom: usize) -> Option<bool> {
        self.explicit
            .iter()
            .chain(&self.implicit)
            .find(|(s, _)| *s == symptom)
            .map(|&(_, v)| v)
    }

    pub fn is_implicit(&self, symptom: usize) -> bool {
        self.implicit.iter().any(|(s, _)| *s == symptom)
    }
}
