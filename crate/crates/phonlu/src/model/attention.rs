//! Dot-product attention pooling over per-timestep states.
//!
//! Keys and values are the states at every timestep; the query is the final
//! timestep's state. PAD positions are masked to an effective -inf before the
//! softmax, so their scores come out exactly 0.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tid};
use crate::model::{argmax_lowest, NEG_MASK};

/// Normalized per-token attention scores and their peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub scores: Vec<f64>,
    /// argmax of `scores`, lowest index on ties.
    pub peak_index: usize,
}

impl AttentionProfile {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let peak_index = argmax_lowest(&scores);
        AttentionProfile { scores, peak_index }
    }

    /// Checks normalization (sum 1 within 1e-6) and peak consistency.
    pub fn check(&self) -> Result<(), String> {
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("scores sum to {sum}, expected 1"));
        }
        if self.scores.iter().any(|&s| s < 0.0) {
            return Err("negative score".into());
        }
        if self.peak_index != argmax_lowest(&self.scores) {
            return Err(format!("peak_index {} is not the argmax", self.peak_index));
        }
        Ok(())
    }
}

/// Pure attention pool: scores = softmax over dot(final_state, state_t),
/// context = score-weighted sum of states. `pad[t]` marks masked positions.
pub fn attention_pool(
    states: &Array2<f64>,
    final_state: &[f64],
    pad: &[bool],
) -> (Array1<f64>, AttentionProfile) {
    let (t_len, dim) = states.dim();
    assert!(t_len >= 1, "attention over no states");
    assert_eq!(final_state.len(), dim, "query dimension mismatch");
    assert_eq!(pad.len(), t_len, "pad mask length mismatch");
    assert!(!pad.iter().all(|&p| p), "attention over all-PAD input");

    let mut raw: Vec<f64> = (0..t_len)
        .map(|t| {
            states
                .row(t)
                .iter()
                .zip(final_state)
                .map(|(s, q)| s * q)
                .sum()
        })
        .collect();
    for (t, &is_pad) in pad.iter().enumerate() {
        if is_pad {
            raw[t] = NEG_MASK;
        }
    }
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let scores: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();

    let mut context = Array1::zeros(dim);
    for (t, &score) in scores.iter().enumerate() {
        context += &(&states.row(t) * score);
    }
    (context, AttentionProfile::from_scores(scores))
}

/// Tape version of [`attention_pool`] for training. `states` is T x H,
/// `final_state` 1 x H. Returns (context 1 x H, scores 1 x T).
pub fn attention_pool_graph(
    tape: &mut Tape,
    states: Tid,
    final_state: Tid,
    pad: &[bool],
) -> (Tid, Tid) {
    let t_len = tape.value(states).nrows();
    assert_eq!(pad.len(), t_len, "pad mask length mismatch");
    let keys_t = tape.transpose(states);
    let mut raw = tape.matmul(final_state, keys_t);
    if pad.iter().any(|&p| p) {
        let mask_row = Array2::from_shape_fn((1, t_len), |(_, t)| {
            if pad[t] {
                NEG_MASK
            } else {
                0.0
            }
        });
        let mask = tape.constant(mask_row);
        raw = tape.add(raw, mask);
    }
    let scores = tape.softmax_rows(raw);
    let context = tape.matmul(scores, states);
    (context, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_max_rel_err;
    use ndarray::array;

    #[test]
    fn singleton_gets_the_whole_score() {
        let states = array![[0.3, -0.7]];
        let (context, profile) = attention_pool(&states, &[0.3, -0.7], &[false]);
        assert_eq!(profile.scores, vec![1.0]);
        assert_eq!(profile.peak_index, 0);
        assert_eq!(context.to_vec(), vec![0.3, -0.7]);
    }

    #[test]
    fn identical_states_score_uniformly() {
        let states = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let (_, profile) = attention_pool(&states, &[1.0, 2.0], &[false; 3]);
        for &s in &profile.scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(profile.peak_index, 0);
    }

    #[test]
    fn three_states_match_brute_force_softmax() {
        let states = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let query = [0.5, 0.5];
        let (context, profile) = attention_pool(&states, &query, &[false; 3]);

        let dots = [0.5f64, 0.5, 0.5];
        let z: f64 = dots.iter().map(|d| d.exp()).sum();
        for (i, &d) in dots.iter().enumerate() {
            assert!((profile.scores[i] - d.exp() / z).abs() < 1e-12);
        }
        for j in 0..2 {
            let expected: f64 = (0..3).map(|t| profile.scores[t] * states[[t, j]]).sum();
            assert!((context[j] - expected).abs() < 1e-12);
        }
        profile.check().unwrap();
    }

    #[test]
    fn pad_positions_score_zero() {
        let states = array![[5.0, 5.0], [1.0, 1.0], [9.0, 9.0]];
        let (_, profile) = attention_pool(&states, &[1.0, 1.0], &[false, false, true]);
        assert_eq!(profile.scores[2], 0.0);
        assert!((profile.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(profile.peak_index, 0);
    }

    #[test]
    fn graph_matches_pure_version() {
        let states_v = array![[0.2, -0.4, 0.1], [1.0, 0.3, -0.2], [-0.5, 0.8, 0.6]];
        let final_v = [-0.5, 0.8, 0.6];
        let pad = [false, true, false];
        let (context, profile) = attention_pool(&states_v, &final_v, &pad);

        let mut tape = Tape::new();
        let states = tape.constant(states_v.clone());
        let final_state = tape.constant(array![[-0.5, 0.8, 0.6]]);
        let (ctx_t, scores_t) = attention_pool_graph(&mut tape, states, final_state, &pad);
        for t in 0..3 {
            assert!((tape.value(scores_t)[[0, t]] - profile.scores[t]).abs() < 1e-12);
        }
        for j in 0..3 {
            assert!((tape.value(ctx_t)[[0, j]] - context[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_gradients() {
        let states_v = array![[0.2, -0.4], [1.0, 0.3], [-0.5, 0.8]];
        let query_v = array![[0.7, -0.1]];
        let err = finite_difference_max_rel_err(
            &[states_v, query_v],
            1e-5,
            |tape, x| {
                let (ctx, _) = attention_pool_graph(tape, x[0], x[1], &[false, false, false]);
                tape.mean_cross_entropy(ctx, vec![(0, 1)])
            },
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn profile_check_catches_violations() {
        let bad = AttentionProfile {
            scores: vec![0.9, 0.2],
            peak_index: 0,
        };
        assert!(bad.check().is_err());
        let wrong_peak = AttentionProfile {
            scores: vec![0.2, 0.8],
            peak_index: 0,
        };
        assert!(wrong_peak.check().is_err());
    }
}
