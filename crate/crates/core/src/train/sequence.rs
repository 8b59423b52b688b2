use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainConfig;
use crate::data::{EncodedRecord, SymptomVocab};
use crate::net::{build_input, sync_labels, LabelMode, NetError, TrainingSequence};

/// Uniform random permutation of `0..n`.
pub fn shuffle_sequence<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Label sets for `[S]_1 .. [S]_{n+1}` given symptom ids in generation order.
pub fn build_sync_labels(order: &[usize], sync_learning: bool, end_class: usize) -> Vec<Vec<usize>> {
    let mode = if sync_learning {
        LabelMode::Synchronous
    } else {
        LabelMode::NextOnly
    };
    sync_labels(order, mode, end_class)
}

/// `repeats` fresh permutations of `0..n`, or none when `n <= 1`.
pub fn build_repeated_sequences<R: Rng + ?Sized>(n: usize, repeats: usize, rng: &mut R) -> Vec<Vec<usize>> {
    if n <= 1 {
        return Vec::new();
    }
    (0..repeats).map(|_| shuffle_sequence(n, rng)).collect()
}

/// One training example with fresh randomness for this step.
pub fn make_sequence<R: Rng + ?Sized>(
    record: &EncodedRecord,
    config: &TrainConfig,
    vocab: &SymptomVocab,
    rng: &mut R,
) -> Result<TrainingSequence, NetError> {
    let n = record.implicit.len();
    let order = if config.shuffle_each_step {
        shuffle_sequence(n, rng)
    } else {
        (0..n).collect()
    };
    let segments = build_repeated_sequences(n, config.repeats, rng);
    let mode = if config.sync_learning {
        LabelMode::Synchronous
    } else {
        LabelMode::NextOnly
    };
    build_input(record, &order, &segments, mode, vocab)
}
