//! Versioned JSON checkpoints: config, vocabulary and every parameter.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Diaformer, ModelConfig, NetError};
use crate::data::SymptomVocab;
use crate::tensor::{Float, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "diaformer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<Float>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: SymptomVocab,
    params: Vec<StoredTensor>,
}

/// A trained model bundled with the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Diaformer,
    pub vocab: SymptomVocab,
}

impl Checkpoint {
    pub fn new(model: Diaformer, vocab: SymptomVocab) -> Self {
        Self { model, vocab }
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: *self.model.config(),
            vocab: self.vocab.clone(),
            params: self
                .model
                .params()
                .iter()
                .map(|p| StoredTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, NetError> {
        let file: CheckpointFile =
            serde_json::from_str(json).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(NetError::Checkpoint(format!("unknown format {}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        if file.config.n_symptoms != file.vocab.n_symptoms()
            || file.config.n_diseases != file.vocab.n_diseases()
        {
            return Err(NetError::Checkpoint(
                "config sizes disagree with the stored vocabulary".into(),
            ));
        }
        // the skeleton fixes names and shapes; its random values are replaced
        let mut model = Diaformer::new(file.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut store = ParamStore::new();
        for p in file.params {
            let t = Tensor::new(p.shape, p.data)
                .map_err(|e| NetError::Checkpoint(format!("{}: {e}", p.name)))?;
            store.add(p.name, t);
        }
        model.set_params(store)?;
        Ok(Self {
            model,
            vocab: file.vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let path = path.as_ref();
        fs::write(path, self.to_json())
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
