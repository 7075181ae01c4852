//! Phone-token parsing, vocabulary construction, and integer encoding.
//!
//! Transcript text files are UTF-8, one utterance per line, tokens separated
//! by whitespace. A phone symbol may span several codepoints ("tʃ") but never
//! contains whitespace. Top-k recognizer output is carried as a
//! [`TopKLattice`]: per frame, the k best (phone, score) hypotheses.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved id for the padding token.
pub const PAD_ID: usize = 0;
/// Reserved id for out-of-vocabulary phones.
pub const UNK_ID: usize = 1;
/// Reserved id for the mask token used by MLM corruption.
pub const MASK_ID: usize = 2;
/// Reserved id for the sequence-level classification token.
pub const CLS_ID: usize = 3;
/// Number of reserved ids preceding the first phone id.
pub const NUM_SPECIAL: usize = 4;

const SPECIAL_SYMBOLS: [&str; NUM_SPECIAL] = ["<pad>", "<unk>", "<mask>", "<cls>"];

#[derive(Debug, Error)]
pub enum PhoneTextError {
    #[error("empty transcript")]
    EmptyTranscript,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid phone token {0:?}: must be non-empty and contain no whitespace")]
    InvalidToken(String),
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("degenerate frame {frame}: all scores are zero")]
    DegenerateFrame { frame: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("lattice parse error at line {line}: {message}")]
    LatticeParse { line: usize, message: String },
}

/// One IPA phone symbol, possibly multi-codepoint.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PhoneToken(String);

impl PhoneToken {
    pub fn new(symbol: impl Into<String>) -> Result<Self, PhoneTextError> {
        let symbol = symbol.into();
        if symbol.is_empty() || symbol.chars().any(char::is_whitespace) {
            return Err(PhoneTextError::InvalidToken(symbol));
        }
        Ok(PhoneToken(symbol))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PhoneToken {
    type Error = PhoneTextError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        PhoneToken::new(value)
    }
}

impl From<PhoneToken> for String {
    fn from(token: PhoneToken) -> String {
        token.0
    }
}

impl fmt::Display for PhoneToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered, non-empty list of phone tokens for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PhoneToken>", into = "Vec<PhoneToken>")]
pub struct PhoneSequence(Vec<PhoneToken>);

impl PhoneSequence {
    pub fn new(tokens: Vec<PhoneToken>) -> Result<Self, PhoneTextError> {
        if tokens.is_empty() {
            return Err(PhoneTextError::EmptyTranscript);
        }
        Ok(PhoneSequence(tokens))
    }

    /// Builds a sequence from plain symbols; handy in tests and generators.
    pub fn from_symbols<S: AsRef<str>>(symbols: &[S]) -> Result<Self, PhoneTextError> {
        let tokens = symbols
            .iter()
            .map(|s| PhoneToken::new(s.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        PhoneSequence::new(tokens)
    }

    pub fn tokens(&self) -> &[PhoneToken] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_tokens(self) -> Vec<PhoneToken> {
        self.0
    }
}

impl TryFrom<Vec<PhoneToken>> for PhoneSequence {
    type Error = PhoneTextError;
    fn try_from(tokens: Vec<PhoneToken>) -> Result<Self, Self::Error> {
        PhoneSequence::new(tokens)
    }
}

impl From<PhoneSequence> for Vec<PhoneToken> {
    fn from(seq: PhoneSequence) -> Vec<PhoneToken> {
        seq.0
    }
}

impl fmt::Display for PhoneSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, token) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(token.as_str())?;
        }
        Ok(())
    }
}

/// Parses one whitespace-separated transcript line.
pub fn parse_transcript(line: &str) -> Result<PhoneSequence, PhoneTextError> {
    let tokens = line
        .split_whitespace()
        .map(PhoneToken::new)
        .collect::<Result<Vec<_>, _>>()?;
    PhoneSequence::new(tokens)
}

/// Reads a transcript file: one utterance per line, blank lines skipped.
pub fn read_transcript_file(path: &Path) -> Result<Vec<PhoneSequence>, PhoneTextError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_transcript(&line)?);
    }
    Ok(out)
}

/// Bidirectional phone ↔ id map with fixed special ids.
///
/// PAD=0, UNK=1, MASK=2, CLS=3; phone ids start at 4, assigned in descending
/// corpus-frequency order with a lexicographic tie-break, so a given corpus
/// always produces the same id assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<PhoneToken, usize>,
    phones: Vec<PhoneToken>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus frequencies; tokens seen fewer than
    /// `min_count` times encode to UNK.
    pub fn build(corpus: &[PhoneSequence], min_count: usize) -> Result<Self, PhoneTextError> {
        assert!(min_count >= 1, "min_count must be at least 1");
        if corpus.is_empty() {
            return Err(PhoneTextError::EmptyCorpus);
        }
        let mut counts: HashMap<&PhoneToken, usize> = HashMap::new();
        for seq in corpus {
            for token in seq.tokens() {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&PhoneToken, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_phones(
            kept.into_iter().map(|(t, _)| t.clone()).collect(),
        ))
    }

    /// Restores a vocabulary from an ordered phone list (id = index + 4).
    pub fn from_phones(phones: Vec<PhoneToken>) -> Self {
        let token_to_id = phones
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + NUM_SPECIAL))
            .collect();
        Vocabulary {
            token_to_id,
            phones,
        }
    }

    /// Total number of ids, special tokens included.
    pub fn size(&self) -> usize {
        self.phones.len() + NUM_SPECIAL
    }

    /// Number of phone ids (size minus the special tokens).
    pub fn num_phones(&self) -> usize {
        self.phones.len()
    }

    /// Ordered phone symbols (index i corresponds to id i + 4).
    pub fn phones(&self) -> &[PhoneToken] {
        &self.phones
    }

    pub fn id_of(&self, token: &PhoneToken) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Symbol for an id; special ids render as `<pad>`, `<unk>`, `<mask>`, `<cls>`.
    pub fn symbol_of(&self, id: usize) -> Option<&str> {
        if id < NUM_SPECIAL {
            Some(SPECIAL_SYMBOLS[id])
        } else {
            self.phones.get(id - NUM_SPECIAL).map(|t| t.as_str())
        }
    }

    /// Encodes a sequence to integer ids; unknown phones map to UNK. With
    /// `prepend_cls` the output starts with the CLS id.
    pub fn encode(&self, seq: &PhoneSequence, prepend_cls: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(seq.len() + usize::from(prepend_cls));
        if prepend_cls {
            ids.push(CLS_ID);
        }
        for token in seq.tokens() {
            ids.push(self.id_of(token).unwrap_or(UNK_ID));
        }
        ids
    }

    /// Decodes ids back to a sequence; special ids decode to their marker
    /// symbols.
    pub fn decode(&self, ids: &[usize]) -> Result<PhoneSequence, PhoneTextError> {
        let tokens = ids
            .iter()
            .map(|&id| {
                self.symbol_of(id)
                    .ok_or_else(|| PhoneTextError::InvalidLattice(format!("id {id} out of range")))
                    .and_then(PhoneToken::new)
            })
            .collect::<Result<Vec<_>, _>>()?;
        PhoneSequence::new(tokens)
    }
}

/// Per-frame top-k recognizer hypotheses: each frame holds exactly k
/// (phone, score) entries sorted by descending score, all scores >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKLattice {
    frames: Vec<Vec<(PhoneToken, f64)>>,
    k: usize,
}

#[derive(Deserialize, Serialize)]
struct LatticeRecord {
    frames: Vec<Vec<(String, f64)>>,
}

impl TopKLattice {
    pub fn new(frames: Vec<Vec<(PhoneToken, f64)>>) -> Result<Self, PhoneTextError> {
        let first = frames
            .first()
            .ok_or_else(|| PhoneTextError::InvalidLattice("no frames".into()))?;
        let k = first.len();
        if k == 0 {
            return Err(PhoneTextError::InvalidLattice("frame with k = 0".into()));
        }
        for (i, frame) in frames.iter().enumerate() {
            if frame.len() != k {
                return Err(PhoneTextError::InvalidLattice(format!(
                    "frame {i} has {} entries, expected {k}",
                    frame.len()
                )));
            }
            for window in frame.windows(2) {
                if window[0].1 < window[1].1 {
                    return Err(PhoneTextError::InvalidLattice(format!(
                        "frame {i} not sorted by descending score"
                    )));
                }
            }
            if frame.iter().any(|&(_, s)| s < 0.0 || !s.is_finite()) {
                return Err(PhoneTextError::InvalidLattice(format!(
                    "frame {i} has a negative or non-finite score"
                )));
            }
        }
        Ok(TopKLattice { frames, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn frames(&self) -> &[Vec<(PhoneToken, f64)>] {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Parses one JSON-lines lattice record: `{"frames": [[["a",0.9],["b",0.1]], ...]}`.
    pub fn from_json_line(line: &str) -> Result<Self, PhoneTextError> {
        let record: LatticeRecord = serde_json::from_str(line)
            .map_err(|e| PhoneTextError::InvalidLattice(e.to_string()))?;
        let frames = record
            .frames
            .into_iter()
            .map(|frame| {
                frame
                    .into_iter()
                    .map(|(symbol, score)| PhoneToken::new(symbol).map(|t| (t, score)))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        TopKLattice::new(frames)
    }

    pub fn to_json_line(&self) -> String {
        let record = LatticeRecord {
            frames: self
                .frames
                .iter()
                .map(|f| f.iter().map(|(t, s)| (t.as_str().to_string(), *s)).collect())
                .collect(),
        };
        serde_json::to_string(&record).expect("lattice serializes")
    }
}

/// Reads a JSON-lines lattice file, one lattice per line.
pub fn read_lattice_file(path: &Path) -> Result<Vec<TopKLattice>, PhoneTextError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            TopKLattice::from_json_line(&line).map_err(|e| PhoneTextError::LatticeParse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Collapses a lattice to its per-frame best hypothesis (first listed wins ties).
pub fn lattice_top1(lattice: &TopKLattice) -> PhoneSequence {
    let tokens = lattice
        .frames()
        .iter()
        .map(|frame| {
            let mut best = &frame[0];
            for entry in &frame[1..] {
                if entry.1 > best.1 {
                    best = entry;
                }
            }
            best.0.clone()
        })
        .collect();
    PhoneSequence::new(tokens).expect("lattice has at least one frame")
}

/// Renormalizes each frame's k scores to sum to 1, giving the mixture weights
/// used when a frame is embedded as the weighted average of its k candidates.
pub fn lattice_embedding_weights(lattice: &TopKLattice) -> Result<Vec<Vec<f64>>, PhoneTextError> {
    lattice
        .frames()
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let sum: f64 = frame.iter().map(|&(_, s)| s).sum();
            if sum <= 0.0 {
                return Err(PhoneTextError::DegenerateFrame { frame: i });
            }
            Ok(frame.iter().map(|&(_, s)| s / sum).collect())
        })
        .collect()
}
