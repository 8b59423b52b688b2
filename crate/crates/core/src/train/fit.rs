use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_sequence, TrainError};
use crate::data::{EncodedRecord, SymptomVocab};
use crate::infer::{evaluate, InferenceConfig};
use crate::net::{Diaformer, NetError, TrainingSequence};
use crate::tensor::{clip_grad_norm, Adam, Float, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Float,
    pub repeats: usize,
    pub shuffle_each_step: bool,
    pub sync_learning: bool,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<Float>,
    /// Epochs without a validation DAcc improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 5e-5,
            repeats: 4,
            shuffle_each_step: true,
            sync_learning: true,
            seed: 0,
            grad_clip: Some(1.0),
            patience: 10,
        }
    }
}

impl TrainConfig {
    /// All three orderless mechanisms switched off.
    pub fn ordered(&self) -> Self {
        Self {
            repeats: 0,
            shuffle_each_step: false,
            sync_learning: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: Float,
    pub l_dis: Float,
    pub l_sym: Float,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dacc: Option<Float>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub srec: Option<Float>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aturn: Option<Float>,
}

/// One pass over `records` in a random order. `step` counts optimizer
/// updates across epochs and is advanced in place.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Diaformer,
    optimizer: &Adam,
    records: &[EncodedRecord],
    vocab: &SymptomVocab,
    config: &TrainConfig,
    epoch: usize,
    step: &mut usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics, TrainError> {
    config.validate()?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(rng);
    let (mut loss_sum, mut dis_sum, mut sym_sum) = (0.0, 0.0, 0.0);
    let mut steps = 0;
    for batch in order.chunks(config.batch_size) {
        let seqs: Vec<TrainingSequence> = batch
            .iter()
            .map(|&i| make_sequence(&records[i], config, vocab, rng))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&TrainingSequence> = seqs.iter().collect();
        let inputs: Vec<_> = seqs.iter().map(|s| &s.input).collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &inputs, Some(rng))?;
        let parts = model.loss(&mut g, &out, &refs)?;
        let loss = g.value(parts.total).item();
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step: *step,
                loss: loss as f64,
                records: batch.to_vec(),
            });
        }
        g.backward_into(parts.total, model.params_mut())
            .map_err(NetError::from)?;
        if let Some(max) = config.grad_clip {
            clip_grad_norm(model.params_mut(), max);
        }
        optimizer.step(model.params_mut());
        let w = batch.len() as Float;
        loss_sum += loss * w;
        dis_sum += parts.l_dis * w;
        sym_sum += parts.l_sym * w;
        steps += 1;
        *step += 1;
    }
    let n = records.len().max(1) as Float;
    Ok(EpochMetrics {
        epoch,
        loss: loss_sum / n,
        l_dis: dis_sum / n,
        l_sym: sym_sum / n,
        steps,
        dacc: None,
        srec: None,
        aturn: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept, if validation ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Trains for up to `config.epochs` epochs. With a validation set, each
/// epoch is evaluated by inquiry dialogue, the parameters with the best DAcc
/// are restored at the end, and training stops after `config.patience`
/// epochs without improvement. Each epoch is written to `log` as one JSON
/// line.
pub fn fit(
    model: &mut Diaformer,
    train: &[EncodedRecord],
    valid: Option<&[EncodedRecord]>,
    vocab: &SymptomVocab,
    config: &TrainConfig,
    infer: &InferenceConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitReport, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let optimizer = Adam::with_lr(config.lr);
    let mut step = 0;
    let mut history = Vec::new();
    let mut best: Option<(Float, usize, crate::tensor::ParamStore)> = None;
    let mut stopped_early = false;
    for epoch in 1..=config.epochs {
        let mut m = train_epoch(model, &optimizer, train, vocab, config, epoch, &mut step, &mut rng)?;
        if let Some(valid) = valid.filter(|v| !v.is_empty()) {
            let e = evaluate(model, vocab, valid, infer)?;
            m.dacc = Some(e.dacc);
            m.srec = Some(e.srec);
            m.aturn = Some(e.aturn);
            if best.as_ref().is_none_or(|(d, _, _)| e.dacc > *d) {
                best = Some((e.dacc, epoch, model.params().clone()));
            }
        }
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            let _ = writeln!(w, "{line}");
        }
        history.push(m);
        if let Some((_, best_epoch, _)) = &best {
            if epoch - best_epoch >= config.patience {
                stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        model.set_params(params)?;
    }
    Ok(FitReport {
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;

    fn setup() -> (Diaformer, SymptomVocab, Vec<EncodedRecord>) {
        let vocab = SymptomVocab::from_names(
            (0..6).map(|i| format!("s{i}")).collect(),
            vec!["a".into(), "b".into()],
        );
        let records = (0..10)
            .map(|i| EncodedRecord {
                explicit: vec![(i % 2, true)],
                implicit: (2..2 + i % 4).map(|s| (s, s % 2 == 0)).collect(),
                disease: i % 2,
            })
            .collect();
        let model = Diaformer::new(ModelConfig::small(&vocab, 1, 8, 2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (model, vocab, records)
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let (mut model, vocab, records) = setup();
        let before = model.params().clone();
        let cfg = TrainConfig { lr: 0.0, batch_size: 3, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_epoch(&mut model, &Adam::with_lr(0.0), &records, &vocab, &cfg, 1, &mut 0, &mut rng).unwrap();
        for (a, b) in before.iter().zip(model.params().iter()) {
            let bits = |t: &crate::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor), "{}", a.name);
        }
    }

    #[test]
    fn same_seed_same_metrics() {
        let (model, vocab, records) = setup();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, ..TrainConfig::default() };
        let run = || {
            let mut m = model.clone();
            fit(&mut m, &records, Some(&records), &vocab, &cfg, &InferenceConfig::default(), None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let (mut model, vocab, records) = setup();
        let before = model.params().clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let report = fit(&mut model, &records, None, &vocab, &cfg, &InferenceConfig::default(), None).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn metrics_are_json_lines() {
        let (mut model, vocab, records) = setup();
        let cfg = TrainConfig { epochs: 2, lr: 1e-3, ..TrainConfig::default() };
        let mut buf = Vec::new();
        fit(&mut model, &records, None, &vocab, &cfg, &InferenceConfig::default(), Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let m: EpochMetrics = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(m.epoch, 2);
        assert!(m.loss > 0.0);
    }

    #[test]
    fn nan_weights_abort_with_diagnostics() {
        let (mut model, vocab, records) = setup();
        let id = model.params().find("head.b_dis").unwrap();
        model.params_mut().get_mut(id).tensor.data_mut()[0] = Float::NAN;
        let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        let err = train_epoch(&mut model, &Adam::default(), &records, &vocab, &cfg, 1, &mut 7, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        match err {
            TrainError::NonFinite { step, records, .. } => {
                assert_eq!(step, 7);
                assert_eq!(records.len(), 4);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_batch_size_rejected() {
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn ordered_config_disables_mechanisms() {
        let c = TrainConfig::default().ordered();
        assert_eq!((c.repeats, c.shuffle_each_step, c.sync_learning), (0, false, false));
    }
}
