//! Adapter around an external phone-recognizer executable.
//!
//! This is the only module that touches audio; everything else in the crate
//! consumes transcripts. The recognizer is invoked through a shell command
//! template, its raw stdout is cached keyed by (audio content, spec), and a
//! cache hit re-parses the stored bytes instead of invoking the command.
//!
//! Output grammar: in `top1` mode the command prints one whitespace-separated
//! phone transcript; in `topk` mode it prints one lattice record in the
//! JSON-lines format of [`crate::phone_text::TopKLattice`]. Recognizers with
//! other output formats need a wrapper script.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::LabeledUtterance;
use crate::phone_text::{lattice_top1, parse_transcript, PhoneSequence, TopKLattice};

#[derive(Debug, Error)]
pub enum RecognizerError {
    #[error("invalid recognizer spec: {0}")]
    InvalidSpec(String),
    #[error("audio file not found: {0}")]
    MissingAudio(PathBuf),
    #[error("recognizer command failed ({status}): {stderr}")]
    CommandFailed { status: String, stderr: String },
    #[error("unparseable recognizer output: {0}")]
    ParseError(String),
    #[error("manifest error at line {line}: {message}")]
    ManifestError { line: usize, message: String },
    #[error("manifest has no rows")]
    EmptyManifest,
    #[error("all {0} manifest rows failed")]
    BatchFailed(usize),
    #[error("serialize error: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How the external command reports its hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Top1,
    TopK,
}

/// External recognizer description: a shell command template with an
/// `{input}` placeholder for the audio path, the expected output mode, the
/// lattice width `k` (≥ 1, checked against `topk` output), and the directory
/// holding cached raw outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizerSpec {
    pub command_template: String,
    pub output_mode: OutputMode,
    pub k: usize,
    pub cache_dir: PathBuf,
}

impl RecognizerSpec {
    pub fn validate(&self) -> Result<(), RecognizerError> {
        if !self.command_template.contains("{input}") {
            return Err(RecognizerError::InvalidSpec(
                "command template must contain an {input} placeholder".into(),
            ));
        }
        if self.k < 1 {
            return Err(RecognizerError::InvalidSpec("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// One recognizer hypothesis: a plain transcript or a top-k lattice.
#[derive(Debug, Clone, PartialEq)]
pub enum Transcription {
    Top1(PhoneSequence),
    TopK(TopKLattice),
}

impl Transcription {
    pub fn as_top1(&self) -> Option<&PhoneSequence> {
        match self {
            Transcription::Top1(seq) => Some(seq),
            Transcription::TopK(_) => None,
        }
    }

    pub fn as_topk(&self) -> Option<&TopKLattice> {
        match self {
            Transcription::TopK(lattice) => Some(lattice),
            Transcription::Top1(_) => None,
        }
    }

    /// Collapses to a plain sequence; lattices reduce to their best path.
    pub fn into_sequence(self) -> PhoneSequence {
        match self {
            Transcription::Top1(seq) => seq,
            Transcription::TopK(lattice) => lattice_top1(&lattice),
        }
    }
}

/// Key covers the audio bytes and every spec field that changes the output;
/// the cache directory itself is deliberately excluded.
fn cache_key(audio: &[u8], spec: &RecognizerSpec) -> String {
    let mut hasher = Sha256::new();
    hasher.update(audio);
    hasher.update([0u8]);
    hasher.update(spec.command_template.as_bytes());
    hasher.update([0u8]);
    hasher.update(match spec.output_mode {
        OutputMode::Top1 => b"top1".as_slice(),
        OutputMode::TopK => b"topk".as_slice(),
    });
    hasher.update([0u8]);
    hasher.update(spec.k.to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.to_string_lossy().replace('\'', "'\\''"))
}

fn invoke(audio_path: &Path, spec: &RecognizerSpec) -> Result<Vec<u8>, RecognizerError> {
    let command = spec
        .command_template
        .replace("{input}", &shell_quote(audio_path));
    let output = Command::new("sh").arg("-c").arg(&command).output()?;
    if !output.status.success() {
        return Err(RecognizerError::CommandFailed {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    Ok(output.stdout)
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write-temp-then-rename in the target directory, so concurrent writers of
/// the same key never expose a partial file (last rename wins; entries for
/// one key are byte-identical when the recognizer is deterministic).
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let dir = path.parent().expect("cache path has a parent directory");
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .expect("cache path has a file name")
        .to_string_lossy()
        .into_owned();
    let tmp = dir.join(format!(
        ".{name}.{}.{}.part",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn parse_output(raw: &[u8], spec: &RecognizerSpec) -> Result<Transcription, RecognizerError> {
    let text = std::str::from_utf8(raw)
        .map_err(|e| RecognizerError::ParseError(format!("output is not utf-8: {e}")))?;
    match spec.output_mode {
        OutputMode::Top1 => {
            let seq =
                parse_transcript(text).map_err(|e| RecognizerError::ParseError(e.to_string()))?;
            Ok(Transcription::Top1(seq))
        }
        OutputMode::TopK => {
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let line = lines
                .next()
                .ok_or_else(|| RecognizerError::ParseError("empty lattice output".into()))?;
            if lines.next().is_some() {
                return Err(RecognizerError::ParseError(
                    "expected exactly one lattice record".into(),
                ));
            }
            let lattice = TopKLattice::from_json_line(line)
                .map_err(|e| RecognizerError::ParseError(e.to_string()))?;
            if lattice.k() != spec.k {
                return Err(RecognizerError::ParseError(format!(
                    "lattice has k = {}, spec expects k = {}",
                    lattice.k(),
                    spec.k
                )));
            }
            Ok(Transcription::TopK(lattice))
        }
    }
}

/// Transcribes one audio file, serving repeats from the cache.
///
/// The cache stores the recognizer's raw stdout keyed by audio content, so
/// renamed or copied files with identical bytes hit the same entry and a hit
/// is parsed exactly like a fresh invocation.
pub fn transcribe(
    audio_path: &Path,
    spec: &RecognizerSpec,
) -> Result<Transcription, RecognizerError> {
    spec.validate()?;
    if !audio_path.is_file() {
        return Err(RecognizerError::MissingAudio(audio_path.to_path_buf()));
    }
    let audio = fs::read(audio_path)?;
    let cache_path = spec.cache_dir.join(format!("{}.out", cache_key(&audio, spec)));
    let raw = match fs::read(&cache_path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let bytes = invoke(audio_path, spec)?;
            write_atomic(&cache_path, &bytes)?;
            bytes
        }
        Err(e) => return Err(e.into()),
    };
    parse_output(&raw, spec)
}

/// One manifest row: where the audio lives plus the metadata copied verbatim
/// onto the transcribed utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub id: String,
    pub intent: String,
    pub language: String,
    pub speaker: Option<String>,
}

fn csv_line(err: &csv::Error) -> usize {
    err.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Reads a manifest CSV with header `path,id,intent,language,speaker`.
/// An empty speaker field means no speaker tag. Ids must be unique.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, RecognizerError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| RecognizerError::ManifestError {
        line: csv_line(&e),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| RecognizerError::ManifestError {
            line: csv_line(&e),
            message: e.to_string(),
        })?
        .clone();
    let expected = ["path", "id", "intent", "language", "speaker"];
    if headers.iter().ne(expected) {
        return Err(RecognizerError::ManifestError {
            line: 1,
            message: format!(
                "header must be {}, got {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows: Vec<ManifestRow> = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let mut row = record.map_err(|e| RecognizerError::ManifestError {
            line,
            message: e.to_string(),
        })?;
        if row.path.as_os_str().is_empty() || row.id.is_empty() {
            return Err(RecognizerError::ManifestError {
                line,
                message: "path and id must be non-empty".into(),
            });
        }
        if row.speaker.as_deref() == Some("") {
            row.speaker = None;
        }
        if !seen.insert(row.id.clone()) {
            return Err(RecognizerError::ManifestError {
                line,
                message: format!("duplicate id {:?}", row.id),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(RecognizerError::EmptyManifest);
    }
    Ok(rows)
}

#[derive(Serialize)]
struct FailureRow<'a> {
    id: &'a str,
    path: String,
    error: String,
}

/// Outcome of a corpus transcription: how many records were written, how many
/// rows failed, and where the failure sidecar lives when there were any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscribeReport {
    pub written: usize,
    pub failed: usize,
    pub sidecar: Option<PathBuf>,
}

fn sidecar_path(out_path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.errors", out_path.display()))
}

/// Transcribes every manifest row and writes one JSONL utterance record per
/// success, in manifest order. Lattice outputs are collapsed to their best
/// path; keep the raw lattices by calling [`transcribe`] per file instead.
///
/// Failures never abort the batch: each failed row becomes one JSON line in
/// a `<out_path>.errors` sidecar, which is only created when something
/// failed. Rows are processed by up to `workers` threads (cache writes are
/// atomic), but output order is always manifest order.
pub fn transcribe_corpus(
    manifest: &[ManifestRow],
    spec: &RecognizerSpec,
    out_path: &Path,
    workers: usize,
) -> Result<TranscribeReport, RecognizerError> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(RecognizerError::EmptyManifest);
    }
    if workers == 0 {
        return Err(RecognizerError::InvalidSpec("workers must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    for (i, row) in manifest.iter().enumerate() {
        if !seen.insert(row.id.as_str()) {
            return Err(RecognizerError::ManifestError {
                line: i + 1,
                message: format!("duplicate id {:?}", row.id),
            });
        }
    }

    let results: Mutex<Vec<Option<Result<PhoneSequence, RecognizerError>>>> =
        Mutex::new((0..manifest.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(manifest.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= manifest.len() {
                    break;
                }
                let result =
                    transcribe(&manifest[i].path, spec).map(Transcription::into_sequence);
                results.lock().expect("no panics while holding lock")[i] = Some(result);
            });
        }
    });
    let results = results.into_inner().expect("worker threads joined");

    let mut out = fs::File::create(out_path)?;
    let mut failures: Vec<(usize, String)> = Vec::new();
    let mut written = 0usize;
    for (i, result) in results.into_iter().enumerate() {
        let row = &manifest[i];
        match result.expect("every row was processed") {
            Ok(phones) => {
                let utt = LabeledUtterance {
                    id: row.id.clone(),
                    phones,
                    intent: row.intent.clone(),
                    language: row.language.clone(),
                    speaker: row.speaker.clone(),
                    slot_span: None,
                };
                serde_json::to_writer(&mut out, &utt)?;
                out.write_all(b"\n")?;
                written += 1;
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }

    let sidecar = if failures.is_empty() {
        None
    } else {
        let path = sidecar_path(out_path);
        let mut file = fs::File::create(&path)?;
        for (i, error) in &failures {
            let row = &manifest[*i];
            let failure = FailureRow {
                id: &row.id,
                path: row.path.to_string_lossy().into_owned(),
                error: error.clone(),
            };
            serde_json::to_writer(&mut file, &failure)?;
            file.write_all(b"\n")?;
        }
        Some(path)
    };

    if written == 0 {
        return Err(RecognizerError::BatchFailed(manifest.len()));
    }
    Ok(TranscribeReport {
        written,
        failed: failures.len(),
        sidecar,
    })
}
