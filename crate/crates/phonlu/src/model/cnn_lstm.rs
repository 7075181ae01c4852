//! CNN+LSTM intent classifier.
//!
//! Pipeline: embed each position, run one same-length convolution per kernel
//! size (ReLU), concatenate the filter maps, feed them through a
//! unidirectional LSTM, and classify from either the last non-PAD state or an
//! attention pool over all states.
//!
//! Parameter names: `embed`, `conv{k}.w`, `conv{k}.b`, `lstm.wx`, `lstm.wh`,
//! `lstm.b` (gate column order input, forget, cell, output), `cls.w`,
//! `cls.b`.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BoundParams, ParamSet, Tape, Tid};
use crate::model::attention::attention_pool_graph;
use crate::model::{
    argmax_lowest, embed_init, frame_is_pad, xavier, zero_pad_frames, AttentionProfile,
    CnnLstmConfig, Frames, ModelError, Prediction,
};

/// Tape handles for one forward pass.
pub struct CnnLstmGraph {
    /// 1 x num_classes.
    pub logits: Tid,
    /// T x lstm_hidden, one state per input position.
    pub states: Tid,
    /// 1 x lstm_hidden, the state at `final_index`.
    pub final_state: Tid,
    /// 1 x T normalized attention scores; None without attention pooling.
    pub scores: Option<Tid>,
    /// Last non-PAD position.
    pub final_index: usize,
}

pub struct CnnLstm {
    pub config: CnnLstmConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
}

impl CnnLstm {
    pub fn init(
        config: CnnLstmConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let e = config.embed_dim;
        let f = config.conv_filters;
        let h = config.lstm_hidden;
        let conv_out = f * config.conv_kernel_sizes.len();

        let mut params = ParamSet::new();
        params.insert("embed", embed_init(vocab_size, e, rng));
        for &k in &config.conv_kernel_sizes {
            params.insert(&format!("conv{k}.w"), xavier(k * e, f, rng));
            params.insert(&format!("conv{k}.b"), Array2::zeros((1, f)));
        }
        params.insert("lstm.wx", xavier(conv_out, 4 * h, rng));
        params.insert("lstm.wh", xavier(h, 4 * h, rng));
        // Forget-gate bias starts at 1 so early training does not flush state.
        let mut lstm_b = Array2::zeros((1, 4 * h));
        lstm_b.slice_mut(ndarray::s![0, h..2 * h]).fill(1.0);
        params.insert("lstm.b", lstm_b);
        params.insert("cls.w", xavier(h, config.num_classes, rng));
        params.insert("cls.b", Array2::zeros((1, config.num_classes)));

        Ok(CnnLstm {
            config,
            vocab_size,
            params,
        })
    }

    /// Inference over one utterance; builds a frozen tape internally.
    pub fn predict(&self, frames: &Frames) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let graph = build_graph(&self.config, &mut tape, &bound, frames)?;
        let logits = tape.value(graph.logits).row(0).to_vec();
        let predicted = argmax_lowest(&logits);
        let attention = graph
            .scores
            .map(|s| AttentionProfile::from_scores(tape.value(s).row(0).to_vec()));
        Ok(Prediction {
            predicted,
            logits,
            states: tape.value(graph.states).clone(),
            final_index: graph.final_index,
            attention,
        })
    }
}

/// Builds the forward graph against already-bound parameters, so training and
/// inference share one code path.
pub fn build_graph(
    config: &CnnLstmConfig,
    tape: &mut Tape,
    bound: &BoundParams,
    frames: &Frames,
) -> Result<CnnLstmGraph, ModelError> {
    let pad: Vec<bool> = frames.iter().map(|f| frame_is_pad(f)).collect();
    let final_index = pad
        .iter()
        .rposition(|&p| !p)
        .ok_or(ModelError::EmptyInput)?;
    let t_len = frames.len();
    let h = config.lstm_hidden;

    let embedded = tape.embed_rows(bound.tid("embed"), zero_pad_frames(frames, &pad));

    // One same-length convolution per kernel, filter maps concatenated.
    let mut conv_outputs = Vec::with_capacity(config.conv_kernel_sizes.len());
    for &k in &config.conv_kernel_sizes {
        let windows = tape.im2col(embedded, k);
        let projected = tape.matmul(windows, bound.tid(&format!("conv{k}.w")));
        let with_bias = tape.add_row(projected, bound.tid(&format!("conv{k}.b")));
        conv_outputs.push(tape.relu(with_bias));
    }
    let conv = if conv_outputs.len() == 1 {
        conv_outputs[0]
    } else {
        tape.concat_cols(&conv_outputs)
    };

    let wx = bound.tid("lstm.wx");
    let wh = bound.tid("lstm.wh");
    let b = bound.tid("lstm.b");
    let mut hidden = tape.constant(Array2::zeros((1, h)));
    let mut cell = tape.constant(Array2::zeros((1, h)));
    let mut per_step = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = tape.slice_rows(conv, t, t + 1);
        let from_input = tape.matmul(x_t, wx);
        let from_hidden = tape.matmul(hidden, wh);
        let summed = tape.add(from_input, from_hidden);
        let gates = tape.add_row(summed, b);
        let i_gate = tape.slice_cols(gates, 0, h);
        let f_gate = tape.slice_cols(gates, h, 2 * h);
        let g_gate = tape.slice_cols(gates, 2 * h, 3 * h);
        let o_gate = tape.slice_cols(gates, 3 * h, 4 * h);
        let i_act = tape.sigmoid(i_gate);
        let f_act = tape.sigmoid(f_gate);
        let g_act = tape.tanh(g_gate);
        let o_act = tape.sigmoid(o_gate);
        let kept = tape.mul(f_act, cell);
        let written = tape.mul(i_act, g_act);
        cell = tape.add(kept, written);
        let cell_squashed = tape.tanh(cell);
        hidden = tape.mul(o_act, cell_squashed);
        per_step.push(hidden);
    }
    let states = tape.concat_rows(&per_step);
    let final_state = per_step[final_index];

    let (pooled, scores) = if config.use_attention {
        let (context, scores) = attention_pool_graph(tape, states, final_state, &pad);
        (context, Some(scores))
    } else {
        (final_state, None)
    };
    let projected = tape.matmul(pooled, bound.tid("cls.w"));
    let logits = tape.add_row(projected, bound.tid("cls.b"));

    Ok(CnnLstmGraph {
        logits,
        states,
        final_state,
        scores,
        final_index,
    })
}
