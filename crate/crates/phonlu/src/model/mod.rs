//! The two classifier families over phone-id sequences.
//!
//! Both consume [`Frames`]: one weighted id list per position. A plain token
//! sequence uses a single weight of 1 per position; top-k recognizer lattices
//! supply their renormalized frame scores, making the embedding of a frame the
//! weighted average of its candidate embeddings.
//!
//! Families:
//! - CNN+LSTM: convolutions over phone embeddings (same-length zero padding,
//!   so states align one-to-one with tokens), a unidirectional LSTM, and
//!   either the final state or a dot-product attention pool feeding the
//!   classifier head.
//! - Transformer encoder: learned positional embeddings, post-layer-norm
//!   blocks, CLS-position classification, and an MLM head for pretraining.

pub mod attention;
pub mod checkpoint;
pub mod cnn_lstm;
pub mod mlm;
pub mod transformer;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phone_text::{Vocabulary, CLS_ID, PAD_ID};

pub use attention::{attention_pool, AttentionProfile};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use cnn_lstm::CnnLstm;
pub use mlm::{mlm_corrupt, mlm_loss, MlmBatch};
pub use transformer::Transformer;

/// Additive mask value: large enough that softmax underflows to exactly 0,
/// finite so arithmetic stays NaN-free.
pub const NEG_MASK: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty input: every position is padding")]
    EmptyInput,
    #[error("input must start with the CLS token")]
    MissingCls,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// One weighted id list per position.
pub type Frames = Vec<Vec<(usize, f64)>>;

/// Wraps plain token ids as single-candidate frames.
pub fn frames_from_ids(ids: &[usize]) -> Frames {
    ids.iter().map(|&id| vec![(id, 1.0)]).collect()
}

/// A position counts as padding only when it is exactly the PAD token.
pub fn frame_is_pad(frame: &[(usize, f64)]) -> bool {
    frame.len() == 1 && frame[0].0 == PAD_ID
}

/// PAD positions embed as exact zero vectors (a zero-weight frame), matching
/// the zero rows a convolution sees past the sequence boundary and keeping
/// gradients off the PAD embedding row.
pub(crate) fn zero_pad_frames(frames: &[Vec<(usize, f64)>], pad: &[bool]) -> Frames {
    frames
        .iter()
        .zip(pad)
        .map(|(f, &p)| if p { vec![(PAD_ID, 0.0)] } else { f.clone() })
        .collect()
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnLstmConfig {
    pub embed_dim: usize,
    pub conv_kernel_sizes: Vec<usize>,
    pub conv_filters: usize,
    pub lstm_hidden: usize,
    pub num_classes: usize,
    pub use_attention: bool,
}

impl CnnLstmConfig {
    /// Defaults: 128-dim embeddings, kernels 3 and 5 with 128 filters each
    /// (256 concatenated), LSTM hidden size 128.
    pub fn new(num_classes: usize) -> Self {
        CnnLstmConfig {
            embed_dim: 128,
            conv_kernel_sizes: vec![3, 5],
            conv_filters: 128,
            lstm_hidden: 128,
            num_classes,
            use_attention: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim < 1
            || self.conv_filters < 1
            || self.lstm_hidden < 1
            || self.num_classes < 1
            || self.conv_kernel_sizes.is_empty()
        {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be at least 1".into(),
            ));
        }
        if let Some(&k) = self.conv_kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(ModelError::InvalidConfig(format!(
                "kernel size {k} is even; odd sizes are required so convolution \
                 output positions align with input tokens"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_hidden: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn new(num_classes: usize) -> Self {
        TransformerConfig {
            embed_dim: 128,
            num_heads: 4,
            num_layers: 4,
            ff_hidden: 256,
            max_seq_len: 128,
            num_classes,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim < 1
            || self.num_heads < 1
            || self.num_layers < 1
            || self.ff_hidden < 1
            || self.num_classes < 1
            || self.max_seq_len < 2
        {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be at least 1 (max_seq_len at least 2)".into(),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Family-tagged model configuration, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    CnnLstm(CnnLstmConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelConfig::CnnLstm(c) => c.validate(),
            ModelConfig::Transformer(c) => c.validate(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::CnnLstm(c) => c.num_classes,
            ModelConfig::Transformer(c) => c.num_classes,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ModelConfig::CnnLstm(_) => "cnn_lstm",
            ModelConfig::Transformer(_) => "transformer",
        }
    }
}

/// Everything one forward pass produces, as plain values.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// argmax of logits, lowest index on ties.
    pub predicted: usize,
    /// Per-position hidden states (LSTM states or transformer hidden).
    pub states: Array2<f64>,
    /// Last non-PAD position (0 for transformer: the CLS position).
    pub final_index: usize,
    /// Present when the model pools with attention.
    pub attention: Option<AttentionProfile>,
}

/// A checkpoint instantiated for inference.
pub enum AnyModel {
    CnnLstm(CnnLstm),
    Transformer(Transformer),
}

pub struct LoadedModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub model: AnyModel,
}

impl LoadedModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let vocab = ck.vocabulary()?;
        let params = ck.param_set();
        let model = match &ck.config {
            ModelConfig::CnnLstm(c) => AnyModel::CnnLstm(CnnLstm {
                config: c.clone(),
                vocab_size: vocab.size(),
                params,
            }),
            ModelConfig::Transformer(c) => AnyModel::Transformer(Transformer {
                config: c.clone(),
                vocab_size: vocab.size(),
                params,
            }),
        };
        Ok(LoadedModel {
            config: ck.config.clone(),
            vocab: vocab.clone(),
            labels: ck.labels.clone(),
            model,
        })
    }

    /// Encodes per family (transformer inputs get a CLS prefix) and runs a
    /// forward pass.
    pub fn predict_sequence(
        &self,
        seq: &crate::phone_text::PhoneSequence,
    ) -> Result<Prediction, ModelError> {
        match &self.model {
            AnyModel::CnnLstm(m) => {
                let ids = self.vocab.encode(seq, false);
                m.predict(&frames_from_ids(&ids))
            }
            AnyModel::Transformer(m) => {
                let ids = self.vocab.encode(seq, true);
                m.predict(&frames_from_ids(&ids))
            }
        }
    }

    /// As [`predict_sequence`](Self::predict_sequence) for weighted frames
    /// (top-k lattice input); the CLS frame is prepended here when needed.
    pub fn predict_frames(&self, frames: &Frames) -> Result<Prediction, ModelError> {
        match &self.model {
            AnyModel::CnnLstm(m) => m.predict(frames),
            AnyModel::Transformer(m) => {
                let mut with_cls = Vec::with_capacity(frames.len() + 1);
                with_cls.push(vec![(CLS_ID, 1.0)]);
                with_cls.extend(frames.iter().cloned());
                m.predict(&with_cls)
            }
        }
    }

    pub fn label_of(&self, index: usize) -> &str {
        &self.labels[index]
    }
}

/// Uniform init on (-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Small uniform init for embedding tables.
pub(crate) fn embed_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.1..0.1))
}
