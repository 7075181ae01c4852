//! Synthetic corpus generators shared by the integration test targets.

// Each test target compiles this module separately and none uses every item.
#![allow(dead_code)]

use phonlu::dataset::LabeledUtterance;
use phonlu::phone_text::PhoneSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 29 filler phones; with the marker token below the inventory is 30.
pub const FILLERS: [&str; 29] = [
    "a", "e", "i", "o", "u", "ə", "ɪ", "ʊ", "ɛ", "ɔ", "p", "t", "k", "b", "d", "g", "m", "n",
    "ŋ", "s", "z", "f", "v", "l", "ʃ", "h", "w", "j", "r",
];

/// Class-deciding token for the marker corpus.
pub const MARKER: &str = "ʁ";

pub fn seq(symbols: &[&str]) -> PhoneSequence {
    PhoneSequence::from_symbols(symbols).unwrap()
}

fn utterance(
    id: String,
    symbols: Vec<&str>,
    intent: &str,
    slot_span: Option<(usize, usize)>,
) -> LabeledUtterance {
    LabeledUtterance {
        id,
        phones: seq(&symbols),
        intent: intent.to_string(),
        language: "syn".to_string(),
        speaker: None,
        slot_span,
    }
}

/// Two-class corpus where class is decided by the presence of one marker
/// token. Lengths are uniform in 8..=15; the phone inventory has 30 symbols.
pub fn marker_corpus(n_per_class: usize, seed: u64) -> Vec<LabeledUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for j in 0..n_per_class {
        let len = rng.random_range(8..=15usize);
        let mut symbols: Vec<&str> = (0..len)
            .map(|_| FILLERS[rng.random_range(0..FILLERS.len())])
            .collect();
        let pos = rng.random_range(0..len);
        symbols[pos] = MARKER;
        out.push(utterance(format!("m{j}"), symbols, "marked", None));

        let len = rng.random_range(8..=15usize);
        let symbols: Vec<&str> = (0..len)
            .map(|_| FILLERS[rng.random_range(0..FILLERS.len())])
            .collect();
        out.push(utterance(format!("p{j}"), symbols, "plain", None));
    }
    out
}

/// Slot trigrams for the planted-slot corpus; disjoint from [`FILLERS`].
pub const SLOT_A: [&str; 3] = ["ʂ", "ɻ", "ʐ"];
pub const SLOT_B: [&str; 3] = ["ɸ", "β", "ɰ"];

fn planted_class(
    label: &str,
    slot: [&str; 3],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledUtterance> {
    (0..n)
        .map(|j| {
            let filler_len = rng.random_range(6..=10usize);
            let pos = rng.random_range(0..=filler_len);
            let mut symbols: Vec<&str> = Vec::with_capacity(filler_len + 3);
            for k in 0..filler_len + 3 {
                if k >= pos && k < pos + 3 {
                    symbols.push(slot[k - pos]);
                } else {
                    symbols.push(FILLERS[rng.random_range(0..16)]);
                }
            }
            utterance(
                format!("{label}{j}"),
                symbols,
                label,
                Some((pos, pos + 3)),
            )
        })
        .collect()
}

/// Two slot-value classes: identical filler distribution, one unique 3-phone
/// slot subsequence per class at a random position. `slot_span` records the
/// planted location.
pub fn planted_slot_classes(
    n_per_class: usize,
    seed: u64,
) -> (Vec<LabeledUtterance>, Vec<LabeledUtterance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = planted_class("slot_a", SLOT_A, n_per_class, &mut rng);
    let b = planted_class("slot_b", SLOT_B, n_per_class, &mut rng);
    (a, b)
}

/// Token-level intersection-over-union of two half-open spans.
pub fn span_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}
