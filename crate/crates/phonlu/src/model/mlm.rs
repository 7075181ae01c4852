//! Masked-language-model corruption and loss.
//!
//! Each corruptible position (anything but CLS and PAD) is independently
//! selected with the corruption rate. A selected position becomes the MASK
//! token with probability 0.8, a uniformly random phone id with 0.1, and
//! stays unchanged with 0.1. The loss reads only the selected positions.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tape, Tid};
use crate::phone_text::{CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID};

/// One corrupted sequence. `target_ids` holds the original ids of the
/// selected positions, in position order; `corruption_mask` marks exactly
/// those positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub corruption_mask: Vec<bool>,
}

impl MlmBatch {
    /// (position, original id) pairs for the selected positions.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.corruption_mask
            .iter()
            .enumerate()
            .filter(|&(_, &m)| m)
            .map(|(pos, _)| pos)
            .zip(self.target_ids.iter().copied())
            .collect()
    }

    pub fn num_corrupted(&self) -> usize {
        self.target_ids.len()
    }
}

/// Corrupts a sequence for MLM training. `vocab_size` bounds the random
/// replacement draw (phone ids are `NUM_SPECIAL..vocab_size`). Deterministic
/// given the RNG state.
pub fn mlm_corrupt(
    ids: &[usize],
    rate: f64,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> MlmBatch {
    assert!(rate > 0.0 && rate < 1.0, "rate must lie in (0, 1)");
    assert!(
        vocab_size > NUM_SPECIAL,
        "vocabulary has no phone ids to draw replacements from"
    );
    let mut input_ids = ids.to_vec();
    let mut target_ids = Vec::new();
    let mut corruption_mask = vec![false; ids.len()];
    for (pos, &id) in ids.iter().enumerate() {
        if id == CLS_ID || id == PAD_ID {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        corruption_mask[pos] = true;
        target_ids.push(id);
        let action = rng.random::<f64>();
        if action < 0.8 {
            input_ids[pos] = MASK_ID;
        } else if action < 0.9 {
            input_ids[pos] = rng.random_range(NUM_SPECIAL..vocab_size);
        }
        // Remaining 0.1: keep the original id; the model must still predict it.
    }
    MlmBatch {
        input_ids,
        target_ids,
        corruption_mask,
    }
}

/// Mean cross-entropy over the corrupted positions, computed from hidden
/// states and the `mlm.w`/`mlm.b` head. Zero corrupted positions yield 0
/// with a warning.
pub fn mlm_loss(hidden: &Array2<f64>, batch: &MlmBatch, params: &ParamSet) -> f64 {
    let targets = batch.targets();
    if targets.is_empty() {
        log::warn!("mlm_loss over zero corrupted positions");
        return 0.0;
    }
    let logits = hidden.dot(params.get("mlm.w")) + params.get("mlm.b");
    let mut total = 0.0;
    for (pos, original) in &targets {
        let row = logits.row(*pos);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[*original];
    }
    total / targets.len() as f64
}

/// Tape version for training: `None` when nothing was corrupted.
pub fn mlm_loss_graph(tape: &mut Tape, mlm_logits: Tid, batch: &MlmBatch) -> Option<Tid> {
    let targets = batch.targets();
    if targets.is_empty() {
        return None;
    }
    Some(tape.mean_cross_entropy(mlm_logits, targets))
}
