//! Transformer encoder with CLS classification and an MLM head.
//!
//! Post-layer-norm blocks: x = LN(x + attn(x)), then x = LN(x + ff(x)).
//! Positional information comes from a learned embedding table added to the
//! token embeddings. Position 0 must hold the CLS token; its final hidden
//! state feeds the classifier head. PAD key columns are masked out of every
//! attention row.
//!
//! Parameter names: `tok_emb`, `pos_emb`, per layer i `l{i}.attn.wq/wk/wv/wo`
//! and `.bq/.bk/.bv/.bo`, `l{i}.ln1.g/.b`, `l{i}.ff.w1/.b1/.w2/.b2`,
//! `l{i}.ln2.g/.b`, plus heads `cls.w`, `cls.b`, `mlm.w`, `mlm.b`.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BoundParams, ParamSet, Tape, Tid};
use crate::model::{
    argmax_lowest, embed_init, frame_is_pad, xavier, zero_pad_frames, Frames, ModelError,
    Prediction, TransformerConfig, NEG_MASK,
};
use crate::phone_text::CLS_ID;

const LN_EPS: f64 = 1e-5;

/// Tape handles for one forward pass.
pub struct TransformerGraph {
    /// 1 x num_classes, from the CLS position.
    pub class_logits: Tid,
    /// kept_len x embed_dim final hidden states.
    pub hidden: Tid,
    /// Input length after truncation to max_seq_len.
    pub kept_len: usize,
}

pub struct Transformer {
    pub config: TransformerConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
}

impl Transformer {
    pub fn init(
        config: TransformerConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamSet::new();
        params.insert("tok_emb", embed_init(vocab_size, d, rng));
        params.insert("pos_emb", embed_init(config.max_seq_len, d, rng));
        for i in 0..config.num_layers {
            for side in ["wq", "wk", "wv", "wo"] {
                params.insert(&format!("l{i}.attn.{side}"), xavier(d, d, rng));
            }
            for side in ["bq", "bk", "bv", "bo"] {
                params.insert(&format!("l{i}.attn.{side}"), Array2::zeros((1, d)));
            }
            params.insert(&format!("l{i}.ln1.g"), Array2::ones((1, d)));
            params.insert(&format!("l{i}.ln1.b"), Array2::zeros((1, d)));
            params.insert(&format!("l{i}.ff.w1"), xavier(d, config.ff_hidden, rng));
            params.insert(&format!("l{i}.ff.b1"), Array2::zeros((1, config.ff_hidden)));
            params.insert(&format!("l{i}.ff.w2"), xavier(config.ff_hidden, d, rng));
            params.insert(&format!("l{i}.ff.b2"), Array2::zeros((1, d)));
            params.insert(&format!("l{i}.ln2.g"), Array2::ones((1, d)));
            params.insert(&format!("l{i}.ln2.b"), Array2::zeros((1, d)));
        }
        params.insert("cls.w", xavier(d, config.num_classes, rng));
        params.insert("cls.b", Array2::zeros((1, config.num_classes)));
        params.insert("mlm.w", xavier(d, vocab_size, rng));
        params.insert("mlm.b", Array2::zeros((1, vocab_size)));
        Ok(Transformer {
            config,
            vocab_size,
            params,
        })
    }

    /// Inference over one CLS-prefixed utterance.
    pub fn predict(&self, frames: &Frames) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let graph = build_graph(&self.config, &mut tape, &bound, frames, None)?;
        let logits = tape.value(graph.class_logits).row(0).to_vec();
        let predicted = argmax_lowest(&logits);
        Ok(Prediction {
            predicted,
            logits,
            states: tape.value(graph.hidden).clone(),
            final_index: 0,
            attention: None,
        })
    }
}

/// Builds the encoder graph. Inputs longer than max_seq_len are truncated to
/// their first max_seq_len positions with a warning; the CLS frame at
/// position 0 is therefore always retained. `dropout_rng` enables inverted
/// dropout at the configured rate (training only).
pub fn build_graph(
    config: &TransformerConfig,
    tape: &mut Tape,
    bound: &BoundParams,
    frames: &Frames,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<TransformerGraph, ModelError> {
    if frames.is_empty() || frames[0] != vec![(CLS_ID, 1.0)] {
        return Err(ModelError::MissingCls);
    }
    let kept_len = frames.len().min(config.max_seq_len);
    if kept_len < frames.len() {
        log::warn!(
            "input of {} positions truncated to max_seq_len {}",
            frames.len(),
            config.max_seq_len
        );
    }
    let frames = &frames[..kept_len];
    let pad: Vec<bool> = frames.iter().map(|f| frame_is_pad(f)).collect();
    let dh = config.head_dim();

    let tok = tape.embed_rows(bound.tid("tok_emb"), zero_pad_frames(frames, &pad));
    let pos = tape.slice_rows(bound.tid("pos_emb"), 0, kept_len);
    let mut x = tape.add(tok, pos);
    x = apply_dropout(tape, x, config.dropout, &mut dropout_rng);

    // Additive key mask: PAD columns pushed to an effective -inf in every row.
    let key_mask = if pad.iter().any(|&p| p) {
        let m = Array2::from_shape_fn((kept_len, kept_len), |(_, j)| {
            if pad[j] {
                NEG_MASK
            } else {
                0.0
            }
        });
        Some(tape.constant(m))
    } else {
        None
    };

    for i in 0..config.num_layers {
        let name = |suffix: &str| format!("l{i}.{suffix}");
        let q_proj = tape.matmul(x, bound.tid(&name("attn.wq")));
        let q = tape.add_row(q_proj, bound.tid(&name("attn.bq")));
        let k_proj = tape.matmul(x, bound.tid(&name("attn.wk")));
        let k = tape.add_row(k_proj, bound.tid(&name("attn.bk")));
        let v_proj = tape.matmul(x, bound.tid(&name("attn.wv")));
        let v = tape.add_row(v_proj, bound.tid(&name("attn.bv")));

        let mut head_contexts = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kh_t = tape.transpose(kh);
            let raw = tape.matmul(qh, kh_t);
            let mut scaled = tape.scale(raw, 1.0 / (dh as f64).sqrt());
            if let Some(mask) = key_mask {
                scaled = tape.add(scaled, mask);
            }
            let weights = tape.softmax_rows(scaled);
            head_contexts.push(tape.matmul(weights, vh));
        }
        let context = if head_contexts.len() == 1 {
            head_contexts[0]
        } else {
            tape.concat_cols(&head_contexts)
        };
        let projected = tape.matmul(context, bound.tid(&name("attn.wo")));
        let mut attn_out = tape.add_row(projected, bound.tid(&name("attn.bo")));
        attn_out = apply_dropout(tape, attn_out, config.dropout, &mut dropout_rng);
        let residual = tape.add(x, attn_out);
        x = tape.layer_norm(
            residual,
            bound.tid(&name("ln1.g")),
            bound.tid(&name("ln1.b")),
            LN_EPS,
        );

        let ff_in = tape.matmul(x, bound.tid(&name("ff.w1")));
        let ff_biased = tape.add_row(ff_in, bound.tid(&name("ff.b1")));
        let ff_act = tape.relu(ff_biased);
        let ff_out_proj = tape.matmul(ff_act, bound.tid(&name("ff.w2")));
        let mut ff_out = tape.add_row(ff_out_proj, bound.tid(&name("ff.b2")));
        ff_out = apply_dropout(tape, ff_out, config.dropout, &mut dropout_rng);
        let residual = tape.add(x, ff_out);
        x = tape.layer_norm(
            residual,
            bound.tid(&name("ln2.g")),
            bound.tid(&name("ln2.b")),
            LN_EPS,
        );
    }

    let cls_hidden = tape.slice_rows(x, 0, 1);
    let projected = tape.matmul(cls_hidden, bound.tid("cls.w"));
    let class_logits = tape.add_row(projected, bound.tid("cls.b"));

    Ok(TransformerGraph {
        class_logits,
        hidden: x,
        kept_len,
    })
}

/// Per-position logits over the vocabulary for MLM training.
pub fn mlm_logits_graph(tape: &mut Tape, bound: &BoundParams, hidden: Tid) -> Tid {
    let projected = tape.matmul(hidden, bound.tid("mlm.w"));
    tape.add_row(projected, bound.tid("mlm.b"))
}

fn apply_dropout(
    tape: &mut Tape,
    x: Tid,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Tid {
    let Some(rng) = rng else {
        return x;
    };
    if rate == 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let mask = Array2::from_shape_fn(tape.value(x).raw_dim(), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}
