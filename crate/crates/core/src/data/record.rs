use std::fmt;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::value::RawValue;

use super::DataError;

/// Symptom name to polarity, in file order. Duplicate names are rejected on
/// deserialization.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct SymptomSet(IndexMap<String, bool>);

impl SymptomSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: bool) -> Option<bool> {
        self.0.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        self.0.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

impl<S: Into<String>> FromIterator<(S, bool)> for SymptomSet {
    fn from_iter<I: IntoIterator<Item = (S, bool)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

impl<'de> Deserialize<'de> for SymptomSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct SetVisitor;

        impl<'de> Visitor<'de> for SetVisitor {
            type Value = SymptomSet;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping symptom names to booleans")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = IndexMap::new();
                while let Some((k, v)) = map.next_entry::<String, bool>()? {
                    if out.contains_key(&k) {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate symptom \"{k}\""
                        )));
                    }
                    out.insert(k, v);
                }
                Ok(SymptomSet(out))
            }
        }

        deserializer.deserialize_map(SetVisitor)
    }
}

/// One diagnosis case: self-reported symptoms, symptoms only discoverable by
/// asking, and the target disease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosisRecord {
    #[serde(rename = "explicit_symptoms")]
    pub explicit: SymptomSet,
    #[serde(rename = "implicit_symptoms")]
    pub implicit: SymptomSet,
    #[serde(rename = "disease_tag")]
    pub disease: String,
}

impl DiagnosisRecord {
    /// Checks that explicit and implicit symptoms are disjoint and, unless
    /// `allow_empty_explicit`, that the explicit set is non-empty.
    pub fn validate(&self, allow_empty_explicit: bool) -> Result<(), String> {
        if let Some(name) = self.explicit.names().find(|n| self.implicit.contains(n)) {
            return Err(format!(
                "symptom \"{name}\" is both explicit and implicit"
            ));
        }
        if self.explicit.is_empty() && !allow_empty_explicit {
            return Err("no explicit symptoms".into());
        }
        if self.disease.is_empty() {
            return Err("empty disease_tag".into());
        }
        Ok(())
    }

    /// Polarity of `name` in the patient's goal, if mentioned at all.
    pub fn polarity(&self, name: &str) -> Option<bool> {
        self.explicit.get(name).or_else(|| self.implicit.get(name))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    pub allow_empty_explicit: bool,
}

/// Parses a JSON array of records, validating each one.
pub fn parse_dataset(json: &str, opts: LoadOptions) -> Result<Vec<DiagnosisRecord>, DataError> {
    let raws: Vec<&RawValue> =
        serde_json::from_str(json).map_err(|e| DataError::Json(e.to_string()))?;
    raws.iter()
        .enumerate()
        .map(|(index, raw)| {
            let record: DiagnosisRecord =
                serde_json::from_str(raw.get()).map_err(|e| DataError::Record {
                    index,
                    msg: e.to_string(),
                })?;
            record
                .validate(opts.allow_empty_explicit)
                .map_err(|msg| DataError::Record { index, msg })?;
            Ok(record)
        })
        .collect()
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    opts: LoadOptions,
) -> Result<Vec<DiagnosisRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_dataset(&text, opts)
}

pub fn dataset_to_json(records: &[DiagnosisRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records always serialize")
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[DiagnosisRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, dataset_to_json(records)).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}
