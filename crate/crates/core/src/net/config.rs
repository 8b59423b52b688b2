use serde::{Deserialize, Serialize};

use super::{NetError, StateId, TypeId};
use crate::data::SymptomVocab;
use crate::tensor::Float;

/// Transformer hyperparameters plus the vocabulary sizes they depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward inner size as a multiple of `hidden`.
    pub ffn_mult: usize,
    pub dropout: Float,
    pub layer_norm_eps: Float,
    pub n_symptoms: usize,
    pub n_diseases: usize,
}

impl ModelConfig {
    /// Full-size network. Eight heads, since 512 does not split into six.
    pub fn full_size(vocab: &SymptomVocab) -> Self {
        Self {
            layers: 5,
            hidden: 512,
            heads: 8,
            ffn_mult: 4,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            n_symptoms: vocab.n_symptoms(),
            n_diseases: vocab.n_diseases(),
        }
    }

    pub fn small(vocab: &SymptomVocab, layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ..Self::full_size(vocab)
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: String| Err(NetError::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_symptoms == 0 || self.n_diseases == 0 {
            return fail("vocabulary must have symptoms and diseases".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    /// Inquiry classes: symptoms plus END.
    pub fn c_inq(&self) -> usize {
        self.n_symptoms + 1
    }

    pub fn c_dis(&self) -> usize {
        self.n_diseases
    }

    /// Symptoms plus `[S]` and `[D]`.
    pub fn token_table_size(&self) -> usize {
        self.n_symptoms + 2
    }

    pub fn state_table_size(&self) -> usize {
        StateId::COUNT
    }

    pub fn type_table_size(&self) -> usize {
        TypeId::COUNT
    }
}
