//! Labeled-dataset ingestion and split management.
//!
//! Datasets are JSON-lines files of labeled utterances. Splitting is always
//! seeded so a (data order, seed) pair reproduces the same partition: ratio
//! splits for train/validation/test, round-robin folds for cross-validation,
//! and nested stratified subsets for learning curves.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phone_text::PhoneSequence;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("dataset too small: {actual} utterances, need at least {required}")]
    TooSmall { actual: usize, required: usize },
    #[error("invalid ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios((f64, f64, f64)),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One labeled utterance: phone tokens plus an intent label. `slot_span` is a
/// half-open token range marking a known slot value, when one is annotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub id: String,
    pub phones: PhoneSequence,
    pub intent: String,
    pub language: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_span: Option<(usize, usize)>,
}

impl LabeledUtterance {
    /// Checks the slot-span invariant: 0 <= start < end <= len(phones).
    pub fn validate(&self) -> Result<(), String> {
        if let Some((start, end)) = self.slot_span {
            if start >= end || end > self.phones.len() {
                return Err(format!(
                    "slot_span [{start},{end}) invalid for {} phones",
                    self.phones.len()
                ));
            }
        }
        Ok(())
    }
}

/// Train/validation/test partition. Lists are disjoint by id; a ratio split
/// covers the source dataset exactly.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledUtterance>,
    pub validation: Vec<LabeledUtterance>,
    pub test: Vec<LabeledUtterance>,
}

/// Cross-validation assignment: `folds[i]` lists the utterance ids held out
/// by fold i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

/// Loads a JSONL dataset, preserving record order. Line numbers in errors are
/// 1-based.
pub fn load_dataset(path: &Path) -> Result<Vec<LabeledUtterance>, DatasetError> {
    let file = std::fs::File::open(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: LabeledUtterance =
            serde_json::from_str(&line).map_err(|e| DatasetError::ParseError {
                line: i + 1,
                message: e.to_string(),
            })?;
        utt.validate().map_err(|message| DatasetError::ParseError {
            line: i + 1,
            message,
        })?;
        if !seen.insert(utt.id.clone()) {
            return Err(DatasetError::DuplicateId(utt.id));
        }
        out.push(utt);
    }
    Ok(out)
}

/// Writes a dataset as JSONL, one record per line.
pub fn save_dataset(path: &Path, data: &[LabeledUtterance]) -> Result<(), DatasetError> {
    let mut file = std::fs::File::create(path)?;
    for utt in data {
        serde_json::to_writer(&mut file, utt).map_err(|e| DatasetError::ParseError {
            line: 0,
            message: e.to_string(),
        })?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<(), DatasetError> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    Ok(())
}

/// Floor allocations for (train, val, test) with the remainder assigned
/// train-first.
fn allocate(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let val = (n as f64 * ratios.1).floor() as usize;
    let test = (n as f64 * ratios.2).floor() as usize;
    let train = n - val - test;
    (train, val, test)
}

/// Seeded shuffle then partition into train/validation/test.
///
/// Sizes are floor(n * ratio) with the remainder assigned to train. When every
/// record carries a speaker tag the partition is by speaker instead of by
/// utterance, so no speaker appears in two splits.
pub fn ratio_split(
    data: &[LabeledUtterance],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    check_ratios(ratios)?;
    if data.len() < 3 {
        return Err(DatasetError::TooSmall {
            actual: data.len(),
            required: 3,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speaker_mode = data.iter().all(|u| u.speaker.is_some());
    if speaker_mode {
        // Group by speaker, shuffle speakers, allocate whole groups.
        let mut by_speaker: BTreeMap<&str, Vec<&LabeledUtterance>> = BTreeMap::new();
        for utt in data {
            by_speaker
                .entry(utt.speaker.as_deref().unwrap())
                .or_default()
                .push(utt);
        }
        if by_speaker.len() < 3 {
            return Err(DatasetError::TooSmall {
                actual: by_speaker.len(),
                required: 3,
            });
        }
        let mut speakers: Vec<&str> = by_speaker.keys().copied().collect();
        speakers.shuffle(&mut rng);
        let (n_train, n_val, _) = allocate(speakers.len(), ratios);
        let mut split = DatasetSplit {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for (i, speaker) in speakers.iter().enumerate() {
            let bucket = if i < n_train {
                &mut split.train
            } else if i < n_train + n_val {
                &mut split.validation
            } else {
                &mut split.test
            };
            bucket.extend(by_speaker[speaker].iter().map(|&u| u.clone()));
        }
        Ok(split)
    } else {
        let mut shuffled: Vec<&LabeledUtterance> = data.iter().collect();
        shuffled.shuffle(&mut rng);
        let (n_train, n_val, _) = allocate(shuffled.len(), ratios);
        Ok(DatasetSplit {
            train: shuffled[..n_train].iter().map(|&u| u.clone()).collect(),
            validation: shuffled[n_train..n_train + n_val]
                .iter()
                .map(|&u| u.clone())
                .collect(),
            test: shuffled[n_train + n_val..]
                .iter()
                .map(|&u| u.clone())
                .collect(),
        })
    }
}

/// Seeded shuffle then round-robin fold assignment: item j of the shuffle
/// lands in fold j mod n, so sizes differ by at most 1.
pub fn make_folds(
    data: &[LabeledUtterance],
    n: usize,
    seed: u64,
) -> Result<FoldPlan, DatasetError> {
    if n < 2 || n > data.len() {
        return Err(DatasetError::TooSmall {
            actual: data.len(),
            required: n.max(2),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<&str> = data.iter().map(|u| u.id.as_str()).collect();
    ids.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); n];
    for (j, id) in ids.into_iter().enumerate() {
        folds[j % n].push(id.to_string());
    }
    Ok(FoldPlan { folds, seed })
}

/// Materializes fold i of a plan as (train, heldout) utterance lists.
pub fn fold_partition<'a>(
    data: &'a [LabeledUtterance],
    plan: &FoldPlan,
    fold: usize,
) -> (Vec<&'a LabeledUtterance>, Vec<&'a LabeledUtterance>) {
    let heldout_ids: HashSet<&str> = plan.folds[fold].iter().map(|s| s.as_str()).collect();
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for utt in data {
        if heldout_ids.contains(utt.id.as_str()) {
            heldout.push(utt);
        } else {
            train.push(utt);
        }
    }
    (train, heldout)
}

/// Nested subsets of sizes step, 2*step, ... and finally the full set.
///
/// Each subset is a prefix of the next. The underlying order interleaves
/// intent classes proportionally (largest deficit first), so every prefix
/// keeps label proportions within one utterance per class of the ideal.
pub fn incremental_subsets(
    train: &[LabeledUtterance],
    step: usize,
    seed: u64,
) -> Vec<Vec<LabeledUtterance>> {
    assert!(step >= 1, "step must be at least 1");
    if train.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Shuffle within each class, keeping class buckets in sorted-label order
    // so the interleave is deterministic.
    let mut by_class: BTreeMap<&str, Vec<&LabeledUtterance>> = BTreeMap::new();
    for utt in train {
        by_class.entry(utt.intent.as_str()).or_default().push(utt);
    }
    let mut buckets: Vec<Vec<&LabeledUtterance>> = by_class.into_values().collect();
    for bucket in &mut buckets {
        bucket.shuffle(&mut rng);
    }
    let total = train.len() as f64;
    let targets: Vec<f64> = buckets.iter().map(|b| b.len() as f64 / total).collect();
    let mut taken = vec![0usize; buckets.len()];
    let mut order: Vec<&LabeledUtterance> = Vec::with_capacity(train.len());
    // Greedy proportional interleave: at each position pick the non-exhausted
    // class with the largest deficit (target share minus realized share).
    while order.len() < train.len() {
        let drawn = (order.len() + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (c, bucket) in buckets.iter().enumerate() {
            if taken[c] >= bucket.len() {
                continue;
            }
            let deficit = targets[c] - taken[c] as f64 / drawn;
            match best {
                Some((_, d)) if deficit <= d => {}
                _ => best = Some((c, deficit)),
            }
        }
        let (c, _) = best.expect("some class still has items");
        order.push(buckets[c][taken[c]]);
        taken[c] += 1;
    }
    let mut sizes: Vec<usize> = (1..)
        .map(|i| i * step)
        .take_while(|&s| s < train.len())
        .collect();
    sizes.push(train.len());
    sizes
        .into_iter()
        .map(|s| order[..s].iter().map(|&u| u.clone()).collect())
        .collect()
}

/// Distinct intent labels in sorted order.
pub fn intent_labels(data: &[LabeledUtterance]) -> Vec<String> {
    let mut labels: Vec<String> = data
        .iter()
        .map(|u| u.intent.clone())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    labels.sort();
    labels
}

/// Counts utterances per intent label.
pub fn label_counts(data: &[LabeledUtterance]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for utt in data {
        *counts.entry(utt.intent.clone()).or_insert(0) += 1;
    }
    counts
}
