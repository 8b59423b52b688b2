#![allow(dead_code)]

use diaformer::data::{EncodedRecord, SymptomVocab};
use diaformer::net::{Diaformer, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn vocab(n_symptoms: usize, n_diseases: usize) -> SymptomVocab {
    SymptomVocab::from_names(
        (0..n_symptoms).map(|i| format!("s{i:02}")).collect(),
        (0..n_diseases).map(|i| format!("d{i}")).collect(),
    )
}

/// Explicit ids `0..m`, implicit ids `m..m+n` with alternating polarity.
pub fn record(m: usize, n: usize, disease: usize) -> EncodedRecord {
    EncodedRecord {
        explicit: (0..m).map(|i| (i, true)).collect(),
        implicit: (m..m + n).map(|i| (i, i % 2 == 0)).collect(),
        disease,
    }
}

pub fn model(vocab: &SymptomVocab, layers: usize, hidden: usize, heads: usize, seed: u64) -> Diaformer {
    let mut cfg = ModelConfig::small(vocab, layers, hidden, heads);
    cfg.dropout = 0.0;
    Diaformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Re-draws every weight from N(0, std^2) so that attention is far from
/// uniform and perturbations propagate visibly.
pub fn randomize(model: &mut Diaformer, std: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for p in model.params_mut().iter_mut() {
        for v in p.tensor.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
