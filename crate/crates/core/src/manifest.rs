//! JSON-lines dataset manifest: one `{audio_path, duration_s, words: [{w, s, e}]}`
//! object per line.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{TimedTranscript, TimedWord};
use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Allowed slack between word end times (or WAV length) and `duration_s`.
pub const DURATION_TOLERANCE_S: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub audio_path: PathBuf,
    pub duration_s: f64,
    pub words: Vec<TimedWord>,
}

impl ManifestRecord {
    pub fn transcript(&self) -> TimedTranscript {
        TimedTranscript::new(self.words.clone())
    }

    pub fn text(&self) -> String {
        self.transcript().text()
    }

    pub fn resolve_audio(&self, base: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            base.join(&self.audio_path)
        }
    }

    /// Structural checks that need no file access.
    pub fn check(&self) -> std::result::Result<(), String> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(format!("duration_s must be positive, got {}", self.duration_s));
        }
        self.transcript().validate().map_err(|e| e.to_string())?;
        for w in &self.words {
            if w.w.trim().is_empty() {
                return Err("empty word".into());
            }
            if w.s < 0.0 || w.e > self.duration_s + DURATION_TOLERANCE_S {
                return Err(format!(
                    "word {:?} at {}-{} s lies outside the {} s recording",
                    w.w, w.s, w.e, self.duration_s
                ));
            }
        }
        Ok(())
    }
}

/// A diagnostic tied to a 1-based manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

/// Outcome of [`validate_manifest`].
#[derive(Clone, Debug, Default)]
pub struct ManifestCheck {
    pub records: Vec<ManifestRecord>,
    pub errors: Vec<LineIssue>,
    pub warnings: Vec<LineIssue>,
}

/// Parses every line, collecting per-line errors instead of stopping at the
/// first. With `check_audio`, each WAV header is opened and its length
/// compared with `duration_s`. Duplicate audio paths are warnings.
pub fn validate_manifest(text: &str, base: &Path, check_audio: bool) -> ManifestCheck {
    let mut out = ManifestCheck::default();
    let mut seen: HashMap<PathBuf, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(LineIssue {
                    line: line_no,
                    message: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        if let Err(message) = rec.check() {
            out.errors.push(LineIssue { line: line_no, message });
            continue;
        }
        if check_audio {
            if let Err(message) = check_wav(&rec.resolve_audio(base), rec.duration_s) {
                out.errors.push(LineIssue { line: line_no, message });
                continue;
            }
        }
        if let Some(first) = seen.insert(rec.audio_path.clone(), line_no) {
            out.warnings.push(LineIssue {
                line: line_no,
                message: format!(
                    "duplicate audio path {} (first on line {first})",
                    rec.audio_path.display()
                ),
            });
        }
        out.records.push(rec);
    }
    out
}

fn check_wav(path: &Path, duration_s: f64) -> std::result::Result<(), String> {
    let reader = hound::WavReader::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format!(
            "{}: unsupported sample rate {} Hz",
            path.display(),
            spec.sample_rate
        ));
    }
    if spec.channels != 1 {
        return Err(format!("{}: expected mono audio", path.display()));
    }
    let actual = reader.duration() as f64 / spec.sample_rate as f64;
    if (actual - duration_s).abs() > DURATION_TOLERANCE_S {
        return Err(format!(
            "{}: audio lasts {actual:.3} s but duration_s is {duration_s}",
            path.display()
        ));
    }
    Ok(())
}

/// Strict reader: any malformed line is an error naming the line.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)?;
    let check = validate_manifest(&text, path.parent().unwrap_or(Path::new(".")), false);
    if let Some(issue) = check.errors.first() {
        return Err(Error::Data(format!(
            "{}:{}: {}",
            path.display(),
            issue.line,
            issue.message
        )));
    }
    Ok(check.records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
