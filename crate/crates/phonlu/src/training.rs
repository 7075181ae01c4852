//! MLM pretraining, classifier training and fine-tuning, grid search, and
//! metric evaluation.
//!
//! All training is single-threaded and deterministic for a given
//! [`TrainConfig::seed`]. Per-epoch progress is returned as [`EpochLog`] rows
//! so callers can emit JSONL.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradAccum, ParamSet, Tape};
use crate::dataset::{
    incremental_subsets, intent_labels, make_folds, fold_partition, ratio_split, DatasetError,
    DatasetSplit, LabeledUtterance,
};
use crate::model::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{
    cnn_lstm, frames_from_ids, transformer, CnnLstmConfig, Frames, ModelConfig, ModelError,
    TransformerConfig,
};
use crate::model::cnn_lstm::CnnLstm;
use crate::model::mlm::{mlm_corrupt, mlm_loss, mlm_loss_graph, MlmBatch};
use crate::model::transformer::{mlm_logits_graph, Transformer};
use crate::model::argmax_lowest;
use crate::phone_text::{PhoneSequence, PhoneTextError, Vocabulary};

/// Fraction of positions selected for corruption during MLM pretraining.
pub const MLM_RATE: f64 = 0.15;

/// Fraction of the pretraining corpus held out for loss monitoring.
pub const PRETRAIN_HELDOUT_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training diverged at epoch {epoch} (loss {loss}); last finite state attached")]
    Diverged {
        epoch: usize,
        loss: f64,
        last: Box<Checkpoint>,
    },
    #[error("label {0:?} appears in validation but not in train")]
    LabelMismatch(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    PhoneText(#[from] PhoneTextError),
}

/// Optimization settings shared by pretraining and classifier training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without monitored improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainingError::InvalidConfig(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainingError::InvalidConfig(
                "batch_size, max_epochs, and patience must be positive".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(TrainingError::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// One row of the per-epoch training log. Epochs are 1-based.
/// `val_accuracy` holds the monitored accuracy for classifier runs (train
/// accuracy when the validation split is empty); `heldout_loss` holds the
/// fixed-corruption held-out MLM loss for pretraining runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    /// Cross-entropy on the monitored split; tie-break for snapshots.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily, so a parameter absent from a step's gradients is left
/// untouched.
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Array2<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let p = params.get_mut(name);
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= self.learning_rate * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
    }
}

/// Classification quality on one dataset. `confusion[t][p]` counts examples
/// with true label index t predicted as p; label indices follow `labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub labels: Vec<String>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// Builds all metrics from (true index, predicted index) pairs.
    pub fn from_pairs(labels: Vec<String>, pairs: &[(usize, usize)]) -> Metrics {
        let n = labels.len();
        assert!(!pairs.is_empty(), "metrics need at least one prediction");
        let mut confusion = vec![vec![0usize; n]; n];
        for &(t, p) in pairs {
            confusion[t][p] += 1;
        }
        let trace: usize = (0..n).map(|i| confusion[i][i]).sum();
        let accuracy = trace as f64 / pairs.len() as f64;
        let mut per_class_f1 = BTreeMap::new();
        for (c, label) in labels.iter().enumerate() {
            let tp = confusion[c][c];
            let r#fn: usize = confusion[c].iter().sum::<usize>() - tp;
            let fp: usize = (0..n).map(|r| confusion[r][c]).sum::<usize>() - tp;
            let denom = 2 * tp + fp + r#fn;
            let f1 = if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            };
            per_class_f1.insert(label.clone(), f1);
        }
        let macro_f1 = per_class_f1.values().sum::<f64>() / n as f64;
        Metrics {
            labels,
            accuracy,
            macro_f1,
            per_class_f1,
            confusion,
        }
    }

    /// Internal consistency: accuracy equals trace/sum and macro F1 equals
    /// the mean of per-class F1.
    pub fn check(&self) -> Result<(), String> {
        let total: usize = self.confusion.iter().flatten().sum();
        let trace: usize = (0..self.labels.len()).map(|i| self.confusion[i][i]).sum();
        if total == 0 {
            return Err("empty confusion matrix".into());
        }
        let acc = trace as f64 / total as f64;
        if (acc - self.accuracy).abs() > 1e-12 {
            return Err(format!(
                "accuracy {} does not match trace/sum {}",
                self.accuracy, acc
            ));
        }
        let mean = self.per_class_f1.values().sum::<f64>() / self.per_class_f1.len() as f64;
        if (mean - self.macro_f1).abs() > 1e-12 {
            return Err(format!(
                "macro_f1 {} does not match mean per-class {}",
                self.macro_f1, mean
            ));
        }
        for v in self.per_class_f1.values().chain([&self.accuracy, &self.macro_f1]) {
            if !(0.0..=1.0).contains(v) {
                return Err(format!("fraction {v} out of [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Result of [`pretrain`]: the best-held-out checkpoint plus the loss
/// trajectory. `best_heldout_loss <= initial_heldout_loss` always holds
/// because the initial state is a candidate.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    pub initial_heldout_loss: f64,
    pub best_heldout_loss: f64,
}

/// Result of [`train_classifier`]: best-monitored checkpoint, its metrics on
/// the monitored split, and the epoch trajectory.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Metrics,
    pub logs: Vec<EpochLog>,
    /// 1-based epoch the returned checkpoint was captured at.
    pub best_epoch: usize,
}

fn encode_frames(config: &ModelConfig, vocab: &Vocabulary, seq: &PhoneSequence) -> Frames {
    match config {
        ModelConfig::CnnLstm(_) => frames_from_ids(&vocab.encode(seq, false)),
        ModelConfig::Transformer(_) => frames_from_ids(&vocab.encode(seq, true)),
    }
}

fn forward_logits(
    config: &ModelConfig,
    params: &ParamSet,
    frames: &Frames,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let logits = match config {
        ModelConfig::CnnLstm(c) => cnn_lstm::build_graph(c, &mut tape, &bound, frames)?.logits,
        ModelConfig::Transformer(c) => {
            transformer::build_graph(c, &mut tape, &bound, frames, None)?.class_logits
        }
    };
    Ok(tape.value(logits).row(0).to_vec())
}

/// MLM pretraining of a transformer encoder on an unlabeled phone corpus.
///
/// The vocabulary is built from the corpus. A 5% slice (at least one
/// sequence) is held out and corrupted once with a fixed seed, so its loss is
/// comparable across epochs; the checkpoint with the lowest held-out loss is
/// returned, which is never worse than the untrained initial state. Training
/// stops after `patience` epochs without held-out improvement.
pub fn pretrain(
    corpus: &[PhoneSequence],
    config: &TransformerConfig,
    tc: &TrainConfig,
) -> Result<PretrainOutcome, TrainingError> {
    tc.validate()?;
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    if corpus.len() < 2 {
        return Err(TrainingError::InvalidConfig(
            "pretraining needs at least 2 sequences (one is held out)".into(),
        ));
    }
    let vocab = Vocabulary::build(corpus, 1)?;
    let model_config = ModelConfig::Transformer(config.clone());

    // Truncate before corruption so MLM targets align with the hidden states
    // the encoder actually produces.
    let encoded: Vec<Vec<usize>> = corpus
        .iter()
        .map(|seq| {
            let mut ids = vocab.encode(seq, true);
            if ids.len() > config.max_seq_len {
                log::warn!(
                    "pretraining sequence of {} ids truncated to {}",
                    ids.len(),
                    config.max_seq_len
                );
                ids.truncate(config.max_seq_len);
            }
            ids
        })
        .collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut eval_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(2));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(3));

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut data_rng);
    let heldout_n = ((encoded.len() as f64 * PRETRAIN_HELDOUT_FRACTION).floor() as usize).max(1);
    let (heldout_idx, train_idx) = order.split_at(heldout_n);

    // Fixed corruption of the held-out slice.
    let heldout: Vec<MlmBatch> = heldout_idx
        .iter()
        .map(|&i| mlm_corrupt(&encoded[i], MLM_RATE, vocab.size(), &mut eval_rng))
        .collect();

    let model = Transformer::init(config.clone(), vocab.size(), &mut init_rng)?;
    let mut params = model.params;

    let heldout_loss = |params: &ParamSet| -> Result<f64, TrainingError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in &heldout {
            if batch.num_corrupted() == 0 {
                continue;
            }
            let mut tape = Tape::new();
            let bound = params.bind_frozen(&mut tape);
            let graph =
                transformer::build_graph(config, &mut tape, &bound, &frames_from_ids(&batch.input_ids), None)?;
            let hidden = tape.value(graph.hidden).clone();
            total += mlm_loss(&hidden, batch, params);
            count += 1;
        }
        if count == 0 {
            // Possible only for pathological held-out slices (all length-1).
            log::warn!("held-out slice has no corruptible positions");
            return Ok(0.0);
        }
        Ok(total / count as f64)
    };

    let initial = heldout_loss(&params)?;
    let mut best = initial;
    let mut best_ck = Checkpoint::new(model_config.clone(), &vocab, Vec::new(), &params);
    let mut last_finite = best_ck.clone();
    let mut logs = Vec::new();
    let mut adam = Adam::new(tc.learning_rate);
    let mut bad_epochs = 0usize;

    let mut train_order: Vec<usize> = train_idx.to_vec();
    for epoch in 1..=tc.max_epochs {
        train_order.shuffle(&mut data_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_examples = 0usize;
        for chunk in train_order.chunks(tc.batch_size) {
            let mut accum = GradAccum::new();
            let mut batch_loss = 0.0;
            let mut batch_examples = 0usize;
            for &i in chunk {
                let batch = mlm_corrupt(&encoded[i], MLM_RATE, vocab.size(), &mut data_rng);
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let drop = (config.dropout > 0.0).then_some(&mut dropout_rng);
                let graph = transformer::build_graph(
                    config,
                    &mut tape,
                    &bound,
                    &frames_from_ids(&batch.input_ids),
                    drop,
                )?;
                let mlm_logits = mlm_logits_graph(&mut tape, &bound, graph.hidden);
                let Some(loss) = mlm_loss_graph(&mut tape, mlm_logits, &batch) else {
                    continue;
                };
                tape.backward(loss);
                accum.absorb(&tape, &bound);
                batch_loss += tape.value(loss)[[0, 0]];
                batch_examples += 1;
            }
            if batch_examples == 0 {
                continue;
            }
            let mean_loss = batch_loss / batch_examples as f64;
            if !mean_loss.is_finite() {
                return Err(TrainingError::Diverged {
                    epoch,
                    loss: mean_loss,
                    last: Box::new(last_finite),
                });
            }
            adam.step(&mut params, &accum.mean());
            epoch_loss += batch_loss;
            epoch_examples += batch_examples;
        }
        let train_loss = if epoch_examples == 0 {
            0.0
        } else {
            epoch_loss / epoch_examples as f64
        };
        let heldout_now = heldout_loss(&params)?;
        if !heldout_now.is_finite() {
            return Err(TrainingError::Diverged {
                epoch,
                loss: heldout_now,
                last: Box::new(last_finite),
            });
        }
        logs.push(EpochLog {
            epoch,
            train_loss,
            heldout_loss: Some(heldout_now),
            val_accuracy: None,
            val_loss: None,
        });
        last_finite = Checkpoint::new(model_config.clone(), &vocab, Vec::new(), &params);
        if heldout_now < best {
            best = heldout_now;
            best_ck = last_finite.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= tc.patience {
                break;
            }
        }
    }

    Ok(PretrainOutcome {
        checkpoint: best_ck,
        logs,
        initial_heldout_loss: initial,
        best_heldout_loss: best,
    })
}

/// Copies every non-classifier-head tensor from `init` into `params`.
/// Shapes must agree; `cls.*` tensors are skipped so the head stays fresh.
fn load_encoder(params: &mut ParamSet, init: &Checkpoint) -> Result<(), TrainingError> {
    for (name, tensor) in &init.params {
        if name.starts_with("cls.") {
            continue;
        }
        let Some(existing) = params.try_get(name) else {
            return Err(TrainingError::InvalidConfig(format!(
                "init checkpoint tensor {name:?} has no counterpart in the target model"
            )));
        };
        if existing.dim() != (tensor.rows, tensor.cols) {
            return Err(TrainingError::InvalidConfig(format!(
                "init checkpoint tensor {name:?} is {}x{} but the target model expects {}x{}",
                tensor.rows,
                tensor.cols,
                existing.dim().0,
                existing.dim().1
            )));
        }
        params.insert(name, tensor.to_array()?);
    }
    Ok(())
}

/// Trains an intent classifier, optionally warm-starting the encoder from a
/// pretrained checkpoint.
///
/// Labels come from the train split in sorted order and fix `num_classes`;
/// the given config's class count is overridden to match. With `init`, the
/// init checkpoint's vocabulary is adopted and all its tensors except the
/// classifier head are loaded; a train-split phone missing from that
/// vocabulary is a [`TrainingError::VocabMismatch`].
///
/// Early stopping monitors validation accuracy (train accuracy when the
/// validation split is empty): patience counts epochs without an accuracy
/// improvement. The returned checkpoint has the highest monitored accuracy
/// seen, with ties resolved to the lowest monitored cross-entropy.
pub fn train_classifier(
    split: &DatasetSplit,
    config: &ModelConfig,
    tc: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome, TrainingError> {
    tc.validate()?;
    if split.train.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let labels = intent_labels(&split.train);
    for utt in &split.validation {
        if !labels.contains(&utt.intent) {
            return Err(TrainingError::LabelMismatch(utt.intent.clone()));
        }
    }

    let vocab = match init {
        Some(ck) => {
            let vocab = ck.vocabulary()?;
            for utt in &split.train {
                for token in utt.phones.tokens() {
                    if vocab.id_of(token).is_none() {
                        return Err(TrainingError::VocabMismatch(format!(
                            "train phone {:?} is absent from the init checkpoint vocabulary",
                            token.as_str()
                        )));
                    }
                }
            }
            vocab
        }
        None => {
            let corpus: Vec<PhoneSequence> =
                split.train.iter().map(|u| u.phones.clone()).collect();
            Vocabulary::build(&corpus, 1)?
        }
    };

    let mut config = config.clone();
    match &mut config {
        ModelConfig::CnnLstm(c) => c.num_classes = labels.len(),
        ModelConfig::Transformer(c) => c.num_classes = labels.len(),
    }
    config.validate()?;
    if let Some(ck) = init {
        if ck.config.family_name() != config.family_name() {
            return Err(TrainingError::InvalidConfig(format!(
                "init checkpoint family {} does not match requested family {}",
                ck.config.family_name(),
                config.family_name()
            )));
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(3));

    let mut params = match &config {
        ModelConfig::CnnLstm(c) => CnnLstm::init(c.clone(), vocab.size(), &mut init_rng)?.params,
        ModelConfig::Transformer(c) => {
            Transformer::init(c.clone(), vocab.size(), &mut init_rng)?.params
        }
    };
    if let Some(ck) = init {
        load_encoder(&mut params, ck)?;
    }

    let label_idx = |intent: &str| -> usize {
        labels
            .iter()
            .position(|l| l == intent)
            .expect("label membership checked above")
    };
    let train_frames: Vec<(Frames, usize)> = split
        .train
        .iter()
        .map(|u| (encode_frames(&config, &vocab, &u.phones), label_idx(&u.intent)))
        .collect();
    let monitor: &[LabeledUtterance] = if split.validation.is_empty() {
        log::warn!("validation split empty; early stopping monitors train accuracy");
        &split.train
    } else {
        &split.validation
    };
    let monitor_frames: Vec<(Frames, usize)> = monitor
        .iter()
        .map(|u| (encode_frames(&config, &vocab, &u.phones), label_idx(&u.intent)))
        .collect();

    // Accuracy plus mean cross-entropy on the monitored split.
    let monitor_pass = |params: &ParamSet| -> Result<(Metrics, f64), TrainingError> {
        let mut pairs = Vec::with_capacity(monitor_frames.len());
        let mut loss_sum = 0.0;
        for (frames, y) in &monitor_frames {
            let logits = forward_logits(&config, params, frames)?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss_sum += lse - logits[*y];
            pairs.push((*y, argmax_lowest(&logits)));
        }
        let loss = loss_sum / monitor_frames.len() as f64;
        Ok((Metrics::from_pairs(labels.clone(), &pairs), loss))
    };

    let mut adam = Adam::new(tc.learning_rate);
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut best_ck = Checkpoint::new(config.clone(), &vocab, labels.clone(), &params);
    let mut best_metrics: Option<Metrics> = None;
    let mut best_epoch = 0usize;
    let mut last_finite = best_ck.clone();
    let mut logs = Vec::new();
    let mut bad_epochs = 0usize;
    let mut order: Vec<usize> = (0..train_frames.len()).collect();

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut data_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let mut accum = GradAccum::new();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (frames, y) = &train_frames[i];
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let logits = match &config {
                    ModelConfig::CnnLstm(c) => {
                        cnn_lstm::build_graph(c, &mut tape, &bound, frames)?.logits
                    }
                    ModelConfig::Transformer(c) => {
                        let drop = (c.dropout > 0.0).then_some(&mut dropout_rng);
                        transformer::build_graph(c, &mut tape, &bound, frames, drop)?.class_logits
                    }
                };
                let loss = tape.mean_cross_entropy(logits, vec![(0, *y)]);
                tape.backward(loss);
                accum.absorb(&tape, &bound);
                batch_loss += tape.value(loss)[[0, 0]];
            }
            let mean_loss = batch_loss / chunk.len() as f64;
            if !mean_loss.is_finite() {
                return Err(TrainingError::Diverged {
                    epoch,
                    loss: mean_loss,
                    last: Box::new(last_finite),
                });
            }
            adam.step(&mut params, &accum.mean());
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train_frames.len() as f64;
        let (metrics, monitor_loss) = monitor_pass(&params)?;
        logs.push(EpochLog {
            epoch,
            train_loss,
            heldout_loss: None,
            val_accuracy: Some(metrics.accuracy),
            val_loss: Some(monitor_loss),
        });
        last_finite = Checkpoint::new(config.clone(), &vocab, labels.clone(), &params);
        // Patience counts only accuracy improvements; an accuracy tie with a
        // lower monitored loss still refines the returned snapshot (margins
        // keep maturing after accuracy saturates).
        let improved = metrics.accuracy > best_acc;
        if improved || (metrics.accuracy == best_acc && monitor_loss < best_loss) {
            best_acc = metrics.accuracy;
            best_loss = monitor_loss;
            best_ck = last_finite.clone();
            best_metrics = Some(metrics);
            best_epoch = epoch;
        }
        if improved {
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= tc.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        checkpoint: best_ck,
        metrics: best_metrics.expect("at least one epoch ran"),
        logs,
        best_epoch,
    })
}

/// Runs a checkpoint over labeled data. Deterministic; rows of the confusion
/// matrix are true labels, columns are predictions. Labels unseen by the
/// checkpoint get rows of their own (and necessarily zero correct
/// predictions).
pub fn evaluate(ck: &Checkpoint, data: &[LabeledUtterance]) -> Result<Metrics, TrainingError> {
    if data.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let model = crate::model::LoadedModel::from_checkpoint(ck)?;
    let mut labels = model.labels.clone();
    let mut extra: Vec<String> = data
        .iter()
        .map(|u| u.intent.clone())
        .filter(|i| !labels.contains(i))
        .collect();
    extra.sort();
    extra.dedup();
    labels.extend(extra);
    let mut pairs = Vec::with_capacity(data.len());
    for utt in data {
        let prediction = model.predict_sequence(&utt.phones)?;
        let t = labels.iter().position(|l| *l == utt.intent).unwrap();
        pairs.push((t, prediction.predicted));
    }
    Ok(Metrics::from_pairs(labels, &pairs))
}

/// Model family selector for grid search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    CnnLstm,
    Transformer,
}

impl ModelFamily {
    pub fn default_config(&self, num_classes: usize) -> ModelConfig {
        match self {
            ModelFamily::CnnLstm => ModelConfig::CnnLstm(CnnLstmConfig::new(num_classes)),
            ModelFamily::Transformer => {
                ModelConfig::Transformer(TransformerConfig::new(num_classes))
            }
        }
    }
}

/// Default transformer search space: heads 2 or 4, depth 2, 4, or 6 layers,
/// feed-forward width 256 or 512.
pub fn default_transformer_space() -> BTreeMap<String, Vec<f64>> {
    BTreeMap::from([
        ("num_heads".to_string(), vec![2.0, 4.0]),
        ("num_layers".to_string(), vec![2.0, 4.0, 6.0]),
        ("ff_hidden".to_string(), vec![256.0, 512.0]),
    ])
}

/// One evaluated grid point.
#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    /// Position in evaluation order, 0-based.
    pub order: usize,
    pub assignment: BTreeMap<String, f64>,
    pub config: ModelConfig,
    pub val_accuracy: f64,
    pub num_params: usize,
}

fn hyper_usize(key: &str, v: f64) -> Result<usize, TrainingError> {
    if v.fract() != 0.0 || v < 1.0 || !v.is_finite() {
        return Err(TrainingError::InvalidConfig(format!(
            "hyperparameter {key} must be a positive integer, got {v}"
        )));
    }
    Ok(v as usize)
}

fn apply_hyper(config: &mut ModelConfig, key: &str, v: f64) -> Result<(), TrainingError> {
    match config {
        ModelConfig::CnnLstm(c) => match key {
            "embed_dim" => c.embed_dim = hyper_usize(key, v)?,
            "conv_filters" => c.conv_filters = hyper_usize(key, v)?,
            "lstm_hidden" => c.lstm_hidden = hyper_usize(key, v)?,
            "use_attention" => c.use_attention = v != 0.0,
            _ => {
                return Err(TrainingError::InvalidConfig(format!(
                    "unknown cnn_lstm hyperparameter {key:?}"
                )))
            }
        },
        ModelConfig::Transformer(c) => match key {
            "embed_dim" => c.embed_dim = hyper_usize(key, v)?,
            "num_heads" => c.num_heads = hyper_usize(key, v)?,
            "num_layers" => c.num_layers = hyper_usize(key, v)?,
            "ff_hidden" => c.ff_hidden = hyper_usize(key, v)?,
            "max_seq_len" => c.max_seq_len = hyper_usize(key, v)?,
            "dropout" => c.dropout = v,
            _ => {
                return Err(TrainingError::InvalidConfig(format!(
                    "unknown transformer hyperparameter {key:?}"
                )))
            }
        },
    }
    Ok(())
}

/// Sorts a leaderboard in place: accuracy descending, then fewer parameters,
/// then evaluation order.
pub fn sort_leaderboard(points: &mut [GridPoint]) {
    points.sort_by(|a, b| {
        b.val_accuracy
            .partial_cmp(&a.val_accuracy)
            .expect("accuracies are finite")
            .then(a.num_params.cmp(&b.num_params))
            .then(a.order.cmp(&b.order))
    });
}

/// Exhaustive grid search over hyperparameter lists keyed by field name.
///
/// Every combination in the Cartesian product (keys in sorted order) trains
/// once on the split; the leaderboard holds one entry per combination. Ties
/// on validation accuracy prefer fewer parameters, then earlier evaluation.
pub fn grid_search(
    split: &DatasetSplit,
    family: ModelFamily,
    space: &BTreeMap<String, Vec<f64>>,
    tc: &TrainConfig,
) -> Result<(ModelConfig, Vec<GridPoint>), TrainingError> {
    if space.is_empty() {
        return Err(TrainingError::InvalidConfig(
            "grid space must have at least one hyperparameter".into(),
        ));
    }
    for (key, values) in space {
        if values.is_empty() {
            return Err(TrainingError::InvalidConfig(format!(
                "grid list for {key:?} is empty"
            )));
        }
    }
    let num_classes = intent_labels(&split.train).len();
    let keys: Vec<&String> = space.keys().collect();
    let dims: Vec<usize> = keys.iter().map(|k| space[*k].len()).collect();
    let total: usize = dims.iter().product();

    let mut points = Vec::with_capacity(total);
    let mut counters = vec![0usize; keys.len()];
    for order in 0..total {
        let mut assignment = BTreeMap::new();
        let mut config = family.default_config(num_classes);
        for (k, key) in keys.iter().enumerate() {
            let v = space[*key][counters[k]];
            apply_hyper(&mut config, key, v)?;
            assignment.insert((*key).clone(), v);
        }
        config.validate()?;
        let outcome = train_classifier(split, &config, tc, None)?;
        let num_params = outcome
            .checkpoint
            .params
            .values()
            .map(|t| t.rows * t.cols)
            .sum();
        points.push(GridPoint {
            order,
            assignment,
            config,
            val_accuracy: outcome.metrics.accuracy,
            num_params,
        });
        // Odometer increment, last key fastest.
        for k in (0..counters.len()).rev() {
            counters[k] += 1;
            if counters[k] < dims[k] {
                break;
            }
            counters[k] = 0;
        }
    }
    sort_leaderboard(&mut points);
    Ok((points[0].config.clone(), points))
}

/// One learning-curve row: metrics on the fixed test split after training on
/// a nested subset.
#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub subset_size: usize,
    pub metrics: Metrics,
}

/// Accuracy as a function of training-set size.
///
/// The dataset is split 60/20/20 once at `tc.seed`; nested subsets of the
/// train split grow by `step` and each trains a fresh model evaluated on the
/// fixed test split. Validation rows whose label a subset lacks are dropped
/// for that row (the model cannot predict them).
pub fn learning_curve(
    dataset: &[LabeledUtterance],
    step: usize,
    config: &ModelConfig,
    tc: &TrainConfig,
) -> Result<Vec<CurveRow>, TrainingError> {
    if step == 0 {
        return Err(TrainingError::InvalidConfig("step must be at least 1".into()));
    }
    let split = ratio_split(dataset, (0.6, 0.2, 0.2), tc.seed)?;
    let subsets = incremental_subsets(&split.train, step, tc.seed);
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let labels = intent_labels(&subset);
        let validation: Vec<LabeledUtterance> = split
            .validation
            .iter()
            .filter(|u| labels.contains(&u.intent))
            .cloned()
            .collect();
        if validation.len() < split.validation.len() {
            log::warn!(
                "subset of {} lacks {} validation labels; those rows are skipped for this row",
                subset.len(),
                split.validation.len() - validation.len()
            );
        }
        let inner = DatasetSplit {
            train: subset.clone(),
            validation,
            test: Vec::new(),
        };
        let outcome = train_classifier(&inner, config, tc, None)?;
        let metrics = evaluate(&outcome.checkpoint, &split.test)?;
        rows.push(CurveRow {
            subset_size: subset.len(),
            metrics,
        });
    }
    Ok(rows)
}

/// Cross-validation summary: per-fold held-out accuracies with their mean
/// and population standard deviation.
#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
}

/// K-fold cross-validation. Each fold trains on the remainder (early
/// stopping monitors train accuracy; folds have no inner validation split)
/// and is scored on the held-out fold.
pub fn cross_validate(
    data: &[LabeledUtterance],
    n_folds: usize,
    config: &ModelConfig,
    tc: &TrainConfig,
) -> Result<CvReport, TrainingError> {
    let plan = make_folds(data, n_folds, tc.seed)?;
    let mut fold_accuracies = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let (train, heldout) = fold_partition(data, &plan, fold);
        let inner = DatasetSplit {
            train: train.into_iter().cloned().collect(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        let heldout: Vec<LabeledUtterance> = heldout.into_iter().cloned().collect();
        let outcome = train_classifier(&inner, config, tc, None)?;
        fold_accuracies.push(evaluate(&outcome.checkpoint, &heldout)?.accuracy);
    }
    let mean = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64;
    let var = fold_accuracies
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / fold_accuracies.len() as f64;
    Ok(CvReport {
        fold_accuracies,
        mean,
        std_dev: var.sqrt(),
    })
}
