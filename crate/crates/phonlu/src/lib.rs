//! Word-free spoken language understanding over phone-token transcriptions.
//!
//! The toolkit classifies intents directly from the phonetic transcription of
//! an utterance (a sequence of IPA phone tokens emitted by a universal phone
//! recognizer) and identifies slot-value spans without slot labels. Two model
//! families are provided: a CNN+LSTM classifier with optional self-attention
//! pooling, and a transformer encoder with a CLS classification head and a
//! masked-language-model pretraining objective. The slot machinery (attention
//! peak localization, windowed excision, splicing, verification) lives in
//! [`lusid`].
//!
//! All models run on a small f64 reverse-mode tape ([`autodiff`]) so training
//! is CPU-only, deterministic under a fixed seed, and gradient-checkable
//! against finite differences.

pub mod autodiff;
pub mod dataset;
pub mod lusid;
pub mod model;
pub mod phone_text;
pub mod recognizer;
pub mod reporting;
pub mod training;
