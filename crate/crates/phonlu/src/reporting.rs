//! Run manifests and result artifacts.
//!
//! Every run directory gets exactly one `manifest.json` recording how to
//! reproduce the run (command line, config path, seed, crate version,
//! timestamps). Results are emitted as JSON or CSV with append-only schemas,
//! plus a standalone SVG bar chart for attention profiles.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lusid::{locate_peak, LusidError, TuneCell};
use crate::model::{AttentionProfile, LoadedModel};
use crate::phone_text::PhoneSequence;
use crate::training::{CurveRow, EpochLog, GridPoint, Metrics};

#[derive(Debug, Error)]
pub enum ReportingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Lusid(#[from] LusidError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Reproducibility record for one run. All fields serialize even when empty
/// so the manifest schema never varies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Full command line, program name included.
    pub command: String,
    /// Config file the run loaded, absent when flags alone configured it.
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    /// Crate version stamp of the binary that produced the outputs.
    pub version: String,
    /// RFC 3339 UTC.
    pub started_at: String,
    pub finished_at: Option<String>,
}

fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .expect("UTC timestamps format")
}

impl RunManifest {
    pub fn new(command: String, config_path: Option<PathBuf>, seed: u64, version: &str) -> Self {
        RunManifest {
            command,
            config_path,
            seed,
            version: version.to_string(),
            started_at: now_rfc3339(),
            finished_at: None,
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now_rfc3339());
    }

    /// Writes `manifest.json` into `dir`, creating the directory if needed.
    /// The fixed file name keeps the directory at exactly one manifest;
    /// rerunning into the same directory replaces it.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf, ReportingError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read_from_dir(dir: &Path) -> Result<RunManifest, ReportingError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Pretty-printed metrics JSON; map keys make the field order deterministic.
pub fn metrics_json(metrics: &Metrics) -> Result<String, ReportingError> {
    let mut text = serde_json::to_string_pretty(metrics)?;
    text.push('\n');
    Ok(text)
}

/// One JSON object per epoch, in order.
pub fn write_epoch_logs(path: &Path, logs: &[EpochLog]) -> Result<(), ReportingError> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_epoch_logs(path: &Path) -> Result<Vec<EpochLog>, ReportingError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(ReportingError::from))
        .collect()
}

fn check_profile_len(
    phones: &PhoneSequence,
    profile: &AttentionProfile,
) -> Result<(), ReportingError> {
    if profile.scores.len() != phones.len() {
        return Err(ReportingError::InvalidInput(format!(
            "{} scores for {} phones",
            profile.scores.len(),
            phones.len()
        )));
    }
    Ok(())
}

/// `token,score` rows, one per phone.
pub fn attention_csv(
    phones: &PhoneSequence,
    profile: &AttentionProfile,
) -> Result<String, ReportingError> {
    check_profile_len(phones, profile)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["token", "score"])?;
    for (token, score) in phones.tokens().iter().zip(&profile.scores) {
        writer.write_record([token.as_str(), &format!("{score}")])?;
    }
    let bytes = writer.into_inner().expect("csv into vec");
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Standalone SVG bar chart of an attention profile. Bar heights are
/// proportional to scores (the maximum fills the plot area) and each bar is
/// labeled with its phone symbol.
pub fn attention_svg(
    phones: &PhoneSequence,
    profile: &AttentionProfile,
) -> Result<String, ReportingError> {
    check_profile_len(phones, profile)?;
    let t = phones.len();
    let (left, right, top, bottom) = (46.0, 16.0, 16.0, 34.0);
    let (slot, bar_w, plot_h) = (34.0, 22.0, 160.0);
    let width = left + slot * t as f64 + right;
    let height = top + plot_h + bottom;
    let base_y = top + plot_h;
    let max = profile
        .scores
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(f64::MIN_POSITIVE);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{base_y}\" x2=\"{:.2}\" y2=\"{base_y}\" stroke=\"#444\"/>\n",
        width - right
    ));
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{base_y}\" stroke=\"#444\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{max:.3}</text>\n",
        left - 6.0,
        top + 4.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">0</text>\n",
        left - 6.0,
        base_y + 4.0
    ));
    for (i, (token, &score)) in phones.tokens().iter().zip(&profile.scores).enumerate() {
        let h = (score / max).max(0.0) * plot_h;
        let x = left + slot * i as f64 + (slot - bar_w) / 2.0;
        let label = xml_escape(token.as_str());
        svg.push_str(&format!(
            "  <rect class=\"bar\" x=\"{x:.2}\" y=\"{:.4}\" width=\"{bar_w}\" height=\"{h:.4}\" \
             fill=\"#4878a8\"><title>{label}: {score:.6}</title></rect>\n",
            base_y - h
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{label}</text>\n",
            x + bar_w / 2.0,
            base_y + 16.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Computes the attention profile of `utterance` under an attention
/// classifier and renders it as (CSV, SVG).
pub fn plot_attention(
    model: &LoadedModel,
    utterance: &PhoneSequence,
) -> Result<(String, String), ReportingError> {
    let (_, profile) = locate_peak(model, utterance)?;
    Ok((
        attention_csv(utterance, &profile)?,
        attention_svg(utterance, &profile)?,
    ))
}

/// `subset_size,accuracy,macro_f1`, one row per curve point.
pub fn curve_csv(rows: &[CurveRow]) -> Result<String, ReportingError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["subset_size", "accuracy", "macro_f1"])?;
    for row in rows {
        writer.write_record([
            row.subset_size.to_string(),
            format!("{}", row.metrics.accuracy),
            format!("{}", row.metrics.macro_f1),
        ])?;
    }
    let bytes = writer.into_inner().expect("csv into vec");
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `order,<hyperparameters...>,val_accuracy,num_params` with hyperparameter
/// columns in sorted key order. Every point must assign the same keys.
pub fn leaderboard_csv(points: &[GridPoint]) -> Result<String, ReportingError> {
    let keys: Vec<&str> = match points.first() {
        Some(p) => p.assignment.keys().map(String::as_str).collect(),
        None => Vec::new(),
    };
    for p in points {
        if p.assignment.keys().map(String::as_str).ne(keys.iter().copied()) {
            return Err(ReportingError::InvalidInput(
                "grid points assign different hyperparameter keys".into(),
            ));
        }
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["order".to_string()];
    header.extend(keys.iter().map(|k| k.to_string()));
    header.extend(["val_accuracy".to_string(), "num_params".to_string()]);
    writer.write_record(&header)?;
    for p in points {
        let mut record = vec![p.order.to_string()];
        record.extend(keys.iter().map(|k| format!("{}", p.assignment[*k])));
        record.extend([format!("{}", p.val_accuracy), p.num_params.to_string()]);
        writer.write_record(&record)?;
    }
    let bytes = writer.into_inner().expect("csv into vec");
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `l,r,accuracy`, one row per tuned window.
pub fn tune_csv(cells: &[TuneCell]) -> Result<String, ReportingError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["l", "r", "accuracy"])?;
    for cell in cells {
        writer.write_record([
            cell.l.to_string(),
            cell.r.to_string(),
            format!("{}", cell.accuracy),
        ])?;
    }
    let bytes = writer.into_inner().expect("csv into vec");
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
