//! Unsupervised slot-value identification.
//!
//! Pipeline: train a 2-class attention classifier on utterances of two slot
//! values, locate each base utterance's attention peak, excise an (l, r)
//! phone window around it, splice in the target slot value's phones, and
//! verify by feeding the spliced utterance back to the classifier. Window
//! sizes are tuned by verification accuracy over a small grid. All steps
//! after training are pure functions of the checkpoint, so generation is
//! deterministic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{intent_labels, DatasetSplit, LabeledUtterance};
use crate::model::attention::AttentionProfile;
use crate::model::checkpoint::CheckpointError;
use crate::model::{AnyModel, CnnLstmConfig, LoadedModel, ModelConfig, ModelError};
use crate::phone_text::{PhoneSequence, PhoneTextError, PhoneToken};
use crate::training::{train_classifier, TrainConfig, TrainOutcome, TrainingError};

#[derive(Debug, Error)]
pub enum LusidError {
    #[error("{0} class has no utterances")]
    EmptyClass(&'static str),
    #[error("spliced utterance of {length} phones exceeds the model maximum {max}")]
    OverLength { length: usize, max: usize },
    #[error("invalid LUSID setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    PhoneText(#[from] PhoneTextError),
}

/// Excision window: `l` phones to the left and `r` phones to the right of
/// the attention peak are removed along with the peak itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpliceSpec {
    pub l: usize,
    pub r: usize,
}

/// Phonetic realization of the target slot value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPrototype {
    pub label: String,
    pub phones: PhoneSequence,
}

/// One spliced utterance. `excised_span` is in source coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpliceResult {
    pub generated: PhoneSequence,
    pub excised_span: (usize, usize),
    pub source_id: String,
    pub target_label: String,
}

/// Trains the 2-class attention classifier LUSID runs on.
///
/// Each input list must carry a single intent label and the two labels must
/// differ; the union trains a CNN+LSTM with attention pooling. Metrics in
/// the outcome are train-set accuracy (there is no inner validation split).
pub fn train_pair_classifier(
    class_a: &[LabeledUtterance],
    class_b: &[LabeledUtterance],
    config: &CnnLstmConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome, LusidError> {
    if class_a.is_empty() {
        return Err(LusidError::EmptyClass("first"));
    }
    if class_b.is_empty() {
        return Err(LusidError::EmptyClass("second"));
    }
    if !config.use_attention {
        return Err(LusidError::InvalidConfig(
            "LUSID requires use_attention = true; the peak comes from the attention profile"
                .into(),
        ));
    }
    if config.num_classes != 2 {
        return Err(LusidError::InvalidConfig(format!(
            "LUSID is a 2-class setup, config has num_classes = {}",
            config.num_classes
        )));
    }
    let labels_a = intent_labels(class_a);
    let labels_b = intent_labels(class_b);
    if labels_a.len() != 1 || labels_b.len() != 1 || labels_a == labels_b {
        return Err(LusidError::InvalidConfig(format!(
            "each class must carry one distinct label, got {labels_a:?} vs {labels_b:?}"
        )));
    }
    let split = DatasetSplit {
        train: class_a.iter().chain(class_b).cloned().collect(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    let model_config = ModelConfig::CnnLstm(config.clone());
    Ok(train_classifier(&split, &model_config, tc, None)?)
}

/// Attention peak of one utterance: the non-PAD position with the highest
/// normalized score, lowest index on ties. The full profile is returned for
/// inspection and plotting.
pub fn locate_peak(
    model: &LoadedModel,
    utterance: &PhoneSequence,
) -> Result<(usize, AttentionProfile), LusidError> {
    match &model.model {
        AnyModel::CnnLstm(m) if m.config.use_attention => {}
        _ => {
            return Err(LusidError::InvalidConfig(
                "locate_peak needs an attention-pooled cnn_lstm checkpoint".into(),
            ))
        }
    }
    let prediction = model.predict_sequence(utterance)?;
    let profile = prediction
        .attention
        .expect("attention-pooled model always yields a profile");
    Ok((profile.peak_index, profile))
}

/// Removes the window `[max(0, peak - l), min(T, peak + r + 1))` and returns
/// the surviving prefix, suffix, and the removed span. The window clamps at
/// both sequence boundaries, so the span always contains the peak.
pub fn excise(
    utterance: &PhoneSequence,
    peak: usize,
    spec: SpliceSpec,
) -> (Vec<PhoneToken>, Vec<PhoneToken>, (usize, usize)) {
    let t = utterance.len();
    assert!(peak < t, "peak {peak} out of range for length {t}");
    let start = peak.saturating_sub(spec.l);
    let end = (peak + spec.r + 1).min(t);
    let tokens = utterance.tokens();
    (
        tokens[..start].to_vec(),
        tokens[end..].to_vec(),
        (start, end),
    )
}

/// Concatenates prefix, prototype phones, and suffix. `excised_span` and
/// `source_id` are threaded through into the result for traceability.
pub fn splice(
    prefix: &[PhoneToken],
    suffix: &[PhoneToken],
    prototype: &SlotPrototype,
    excised_span: (usize, usize),
    source_id: &str,
    max_len: Option<usize>,
) -> Result<SpliceResult, LusidError> {
    let mut tokens = Vec::with_capacity(prefix.len() + prototype.phones.len() + suffix.len());
    tokens.extend_from_slice(prefix);
    tokens.extend_from_slice(prototype.phones.tokens());
    tokens.extend_from_slice(suffix);
    if let Some(max) = max_len {
        if tokens.len() > max {
            return Err(LusidError::OverLength {
                length: tokens.len(),
                max,
            });
        }
    }
    Ok(SpliceResult {
        generated: PhoneSequence::new(tokens)?,
        excised_span,
        source_id: source_id.to_string(),
        target_label: prototype.label.clone(),
    })
}

/// True iff the classifier assigns the generated utterance to the target
/// class.
pub fn verify(
    model: &LoadedModel,
    generated: &PhoneSequence,
    target_class: usize,
) -> Result<bool, LusidError> {
    if target_class > 1 {
        return Err(LusidError::InvalidConfig(format!(
            "target_class must be 0 or 1, got {target_class}"
        )));
    }
    Ok(model.predict_sequence(generated)?.predicted == target_class)
}

fn target_index(model: &LoadedModel, label: &str) -> Result<usize, LusidError> {
    model
        .labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| {
            LusidError::InvalidConfig(format!(
                "label {label:?} is not among the checkpoint labels {:?}",
                model.labels
            ))
        })
}

/// One cell of the window-tuning grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TuneCell {
    pub l: usize,
    pub r: usize,
    /// Verification accuracy of splices generated at this window.
    pub accuracy: f64,
}

fn pick_best(cells: &[TuneCell]) -> SpliceSpec {
    let best = cells
        .iter()
        .reduce(|best, c| {
            let better = c.accuracy > best.accuracy
                || (c.accuracy == best.accuracy
                    && (c.l + c.r < best.l + best.r
                        || (c.l + c.r == best.l + best.r && c.l < best.l)));
            if better {
                c
            } else {
                best
            }
        })
        .expect("grid is non-empty");
    SpliceSpec {
        l: best.l,
        r: best.r,
    }
}

/// Grid search over excision windows.
///
/// For every (l, r) pair the full locate, excise, splice, verify pipeline
/// runs over the base utterances; cells report verification accuracy in
/// l-major order. Ties prefer the smaller l + r, then the smaller l.
pub fn tune_windows(
    model: &LoadedModel,
    base: &[LabeledUtterance],
    prototype: &SlotPrototype,
    l_range: &[usize],
    r_range: &[usize],
) -> Result<(SpliceSpec, Vec<TuneCell>), LusidError> {
    if l_range.is_empty() || r_range.is_empty() {
        return Err(LusidError::InvalidConfig(
            "window ranges must be non-empty".into(),
        ));
    }
    if base.is_empty() {
        return Err(LusidError::EmptyClass("base"));
    }
    let target = target_index(model, &prototype.label)?;
    // The peak does not depend on the window, so locate once per utterance.
    let peaks = base
        .iter()
        .map(|u| locate_peak(model, &u.phones).map(|(p, _)| p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cells = Vec::with_capacity(l_range.len() * r_range.len());
    for &l in l_range {
        for &r in r_range {
            let spec = SpliceSpec { l, r };
            let mut verified = 0usize;
            for (utt, &peak) in base.iter().zip(&peaks) {
                let (prefix, suffix, span) = excise(&utt.phones, peak, spec);
                let result = splice(&prefix, &suffix, prototype, span, &utt.id, None)?;
                if verify(model, &result.generated, target)? {
                    verified += 1;
                }
            }
            cells.push(TuneCell {
                l,
                r,
                accuracy: verified as f64 / base.len() as f64,
            });
        }
    }
    Ok((pick_best(&cells), cells))
}

/// One-shot prototype extraction: locate the peak of a single utterance of
/// the target slot value and take the excised window as its phones.
pub fn extract_prototype(
    model: &LoadedModel,
    target_utterance: &LabeledUtterance,
    spec: SpliceSpec,
) -> Result<SlotPrototype, LusidError> {
    let (peak, _) = locate_peak(model, &target_utterance.phones)?;
    let (_, _, span) = excise(&target_utterance.phones, peak, spec);
    let tokens = target_utterance.phones.tokens()[span.0..span.1].to_vec();
    Ok(SlotPrototype {
        label: target_utterance.intent.clone(),
        phones: PhoneSequence::new(tokens)?,
    })
}

/// A splice plus everything needed to emit it as a dataset record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratedExample {
    pub splice: SpliceResult,
    pub verified: bool,
    /// Copied from the source utterance.
    pub language: String,
    /// Prototype location in generated coordinates.
    pub spliced_span: (usize, usize),
}

impl GeneratedExample {
    /// Dataset-compatible record: intent is the target label and slot_span
    /// marks the spliced prototype.
    pub fn to_utterance(&self) -> LabeledUtterance {
        LabeledUtterance {
            id: format!("{}::gen::{}", self.splice.source_id, self.splice.target_label),
            phones: self.splice.generated.clone(),
            intent: self.splice.target_label.clone(),
            language: self.language.clone(),
            speaker: None,
            slot_span: Some(self.spliced_span),
        }
    }
}

/// Output of [`generate_dataset`]: one example per base utterance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationReport {
    pub examples: Vec<GeneratedExample>,
    pub verified_fraction: f64,
}

impl GenerationReport {
    pub fn to_utterances(&self, verified_only: bool) -> Vec<LabeledUtterance> {
        self.examples
            .iter()
            .filter(|e| e.verified || !verified_only)
            .map(GeneratedExample::to_utterance)
            .collect()
    }
}

/// Splices the prototype into every base utterance and verifies each result.
///
/// Attention always comes from `model`; verification uses `verifier` when
/// given (a stricter held-out check), otherwise the same model. Returns one
/// example per base utterance, so counts always match.
pub fn generate_dataset(
    model: &LoadedModel,
    base: &[LabeledUtterance],
    prototype: &SlotPrototype,
    spec: SpliceSpec,
    verifier: Option<&LoadedModel>,
) -> Result<GenerationReport, LusidError> {
    if base.is_empty() {
        return Err(LusidError::EmptyClass("base"));
    }
    let scorer = verifier.unwrap_or(model);
    let target = target_index(scorer, &prototype.label)?;
    let mut examples = Vec::with_capacity(base.len());
    let mut verified_count = 0usize;
    for utt in base {
        let (peak, _) = locate_peak(model, &utt.phones)?;
        let (prefix, suffix, span) = excise(&utt.phones, peak, spec);
        let result = splice(&prefix, &suffix, prototype, span, &utt.id, None)?;
        let verified = verify(scorer, &result.generated, target)?;
        verified_count += verified as usize;
        examples.push(GeneratedExample {
            spliced_span: (span.0, span.0 + prototype.phones.len()),
            verified,
            language: utt.language.clone(),
            splice: result,
        });
    }
    Ok(GenerationReport {
        verified_fraction: verified_count as f64 / base.len() as f64,
        examples,
    })
}
