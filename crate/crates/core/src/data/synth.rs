//! Parametric synthetic dataset generator with a planted disease/symptom
//! structure.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DiagnosisRecord, SymptomSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseRow {
    pub name: String,
    /// Probability that each symptom (by index into `symptoms`) is present.
    pub symptom_probs: Vec<f64>,
}

/// Inclusive integer range sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

/// Order in which a record lists its implicit symptoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplicitOrder {
    /// Position in the symptom catalog, like a form filled top to bottom.
    #[default]
    Catalog,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub symptoms: Vec<String>,
    pub diseases: Vec<DiseaseRow>,
    pub n_records: usize,
    /// Number of present symptoms moved into the explicit set.
    pub explicit_count: CountRange,
    /// Cap on the implicit set size; `None` keeps every remaining symptom.
    #[serde(default)]
    pub implicit_max: Option<usize>,
    /// Denied symptoms added per record, as a fraction of the present ones.
    #[serde(default)]
    pub false_fraction: f64,
    #[serde(default)]
    pub implicit_order: ImplicitOrder,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorSpec {
    /// Ten diseases in five sibling pairs over forty symptoms.
    ///
    /// Each pair shares four group symptoms; each disease has two symptoms of
    /// its own. Every other symptom appears as background noise. With a
    /// single explicit symptom the self-report usually only identifies the
    /// pair, so inquiry is needed to separate siblings.
    pub fn planted_default() -> Self {
        const DISEASES: usize = 10;
        const SYMPTOMS: usize = 40;
        const GROUP_SIZE: usize = 4;
        let symptoms: Vec<String> = (0..SYMPTOMS).map(|i| format!("sym_{i:02}")).collect();
        let diseases = (0..DISEASES)
            .map(|d| {
                let group = d / 2;
                let mut probs = vec![0.02; SYMPTOMS];
                for k in 0..GROUP_SIZE {
                    probs[group * GROUP_SIZE + k] = 0.95;
                }
                let own = 5 * GROUP_SIZE + 2 * d;
                probs[own] = 0.95;
                probs[own + 1] = 0.95;
                DiseaseRow {
                    name: format!("dis_{d:02}"),
                    symptom_probs: probs,
                }
            })
            .collect();
        Self {
            symptoms,
            diseases,
            n_records: 2500,
            explicit_count: CountRange { min: 1, max: 1 },
            implicit_max: None,
            false_fraction: 0.05,
            implicit_order: ImplicitOrder::Catalog,
            seed: 20_220_425,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |msg: String| Err(DataError::GeneratorSpec(msg));
        if self.diseases.is_empty() || self.symptoms.is_empty() {
            return err("need at least one disease and one symptom".into());
        }
        for row in &self.diseases {
            if row.symptom_probs.len() != self.symptoms.len() {
                return err(format!(
                    "row {} has {} probabilities for {} symptoms",
                    row.name,
                    row.symptom_probs.len(),
                    self.symptoms.len()
                ));
            }
            if let Some(p) = row
                .symptom_probs
                .iter()
                .find(|p| !(0.0..=1.0).contains(*p))
            {
                return err(format!("row {} has probability {p} outside [0,1]", row.name));
            }
            if row.symptom_probs.iter().all(|&p| p == 0.0) {
                return err(format!("row {} can never produce a symptom", row.name));
            }
        }
        if self.explicit_count.min > self.explicit_count.max {
            return err("explicit_count.min > explicit_count.max".into());
        }
        if self.explicit_count.max == 0 {
            return err("explicit_count.max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.false_fraction) {
            return err(format!("false_fraction {} outside [0,1]", self.false_fraction));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let spec: Self =
            serde_json::from_str(&text).map_err(|e| DataError::Json(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

const MAX_RESAMPLES: usize = 10_000;

/// Samples `spec.n_records` records. Deterministic in `seed`.
pub fn generate_synthetic(spec: &GeneratorSpec, seed: u64) -> Result<Vec<DiagnosisRecord>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sym = spec.symptoms.len();
    let mut out = Vec::with_capacity(spec.n_records);
    for _ in 0..spec.n_records {
        let row = &spec.diseases[rng.random_range(0..spec.diseases.len())];
        let mut present = Vec::new();
        for _ in 0..MAX_RESAMPLES {
            present = (0..n_sym)
                .filter(|&s| rng.random::<f64>() < row.symptom_probs[s])
                .collect();
            if !present.is_empty() {
                break;
            }
        }
        if present.is_empty() {
            return Err(DataError::GeneratorSpec(format!(
                "row {} produced no symptoms after {MAX_RESAMPLES} draws",
                row.name
            )));
        }

        // denied symptoms come from the ones this patient does not have
        let want_false = spec.false_fraction * present.len() as f64;
        let mut n_false = want_false.floor() as usize;
        if rng.random::<f64>() < want_false.fract() {
            n_false += 1;
        }
        let mut absent: Vec<usize> = (0..n_sym).filter(|s| !present.contains(s)).collect();
        absent.shuffle(&mut rng);
        absent.truncate(n_false);

        present.shuffle(&mut rng);
        let k = rng
            .random_range(spec.explicit_count.min..=spec.explicit_count.max)
            .clamp(1, present.len());
        let explicit: SymptomSet = present[..k]
            .iter()
            .map(|&s| (spec.symptoms[s].clone(), true))
            .collect();
        let mut implicit: Vec<(usize, bool)> = present[k..]
            .iter()
            .map(|&s| (s, true))
            .chain(absent.into_iter().map(|s| (s, false)))
            .collect();
        implicit.shuffle(&mut rng);
        if let Some(cap) = spec.implicit_max {
            implicit.truncate(cap);
        }
        if spec.implicit_order == ImplicitOrder::Catalog {
            implicit.sort_unstable();
        }
        out.push(DiagnosisRecord {
            explicit,
            implicit: implicit
                .into_iter()
                .map(|(s, v)| (spec.symptoms[s].clone(), v))
                .collect(),
            disease: row.name.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset_to_json;

    #[test]
    fn degenerate_spec_gives_identical_records() {
        let spec = GeneratorSpec {
            symptoms: vec!["s".into()],
            diseases: vec![DiseaseRow {
                name: "d".into(),
                symptom_probs: vec![1.0],
            }],
            n_records: 20,
            explicit_count: CountRange { min: 1, max: 1 },
            implicit_max: Some(0),
            false_fraction: 0.0,
            implicit_order: ImplicitOrder::Catalog,
            seed: 0,
        };
        let records = generate_synthetic(&spec, 3).unwrap();
        assert_eq!(records.len(), 20);
        assert!(records.iter().all(|r| r == &records[0]));
        assert_eq!(records[0].explicit.get("s"), Some(true));
        assert!(records[0].implicit.is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = GeneratorSpec::planted_default();
        let a = dataset_to_json(&generate_synthetic(&spec, 11).unwrap());
        let b = dataset_to_json(&generate_synthetic(&spec, 11).unwrap());
        assert_eq!(a, b);
        let c = dataset_to_json(&generate_synthetic(&spec, 12).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn bad_probabilities_rejected() {
        let mut spec = GeneratorSpec::planted_default();
        spec.diseases[3].symptom_probs[7] = 1.5;
        assert!(matches!(
            generate_synthetic(&spec, 0),
            Err(DataError::GeneratorSpec(_))
        ));
        spec.diseases[3].symptom_probs[7] = -0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn output_satisfies_record_invariants() {
        let spec = GeneratorSpec::planted_default();
        for r in generate_synthetic(&spec, 5).unwrap() {
            r.validate(false).unwrap();
            assert!(r.explicit.iter().all(|(_, v)| v));
        }
    }

    #[test]
    fn empirical_frequencies_track_rows() {
        let mut spec = GeneratorSpec::planted_default();
        spec.n_records = 2000;
        let records = generate_synthetic(&spec, spec.seed).unwrap();
        let n_sym = spec.symptoms.len();
        let mut counts = vec![vec![0usize; n_sym]; spec.diseases.len()];
        let mut totals = vec![0usize; spec.diseases.len()];
        for r in &records {
            let d = spec.diseases.iter().position(|row| row.name == r.disease).unwrap();
            totals[d] += 1;
            for (s, name) in spec.symptoms.iter().enumerate() {
                if r.polarity(name) == Some(true) {
                    counts[d][s] += 1;
                }
            }
        }
        for (d, row) in spec.diseases.iter().enumerate() {
            assert!(totals[d] > 0);
            for s in 0..n_sym {
                let freq = counts[d][s] as f64 / totals[d] as f64;
                let p = row.symptom_probs[s];
                assert!(
                    (freq - p).abs() <= 0.05,
                    "{} / {}: {freq} vs {p}",
                    row.name,
                    spec.symptoms[s]
                );
            }
        }
    }

    #[test]
    fn catalog_order_is_sorted() {
        let spec = GeneratorSpec::planted_default();
        for r in generate_synthetic(&spec, 2).unwrap().iter().take(50) {
            let ids: Vec<usize> = r
                .implicit
                .names()
                .map(|n| spec.symptoms.iter().position(|s| s == n).unwrap())
                .collect();
            assert!(ids.windows(2).all(|w| w[0] < w[1]), "{ids:?}");
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = GeneratorSpec::planted_default();
        let json = serde_json::to_string(&spec).unwrap();
        let back: GeneratorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
