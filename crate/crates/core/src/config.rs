//! Experiment configuration stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSchedule;
use crate::dsp::NormScope;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use crate::window::MergeMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decoding window; defaults to the model's training context.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_s: Option<f64>,
    /// Stride as a fraction of the window.
    pub stride_fraction: f64,
    pub baseline_context_s: f64,
    pub merge: MergeMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window_s: None,
            stride_fraction: 0.125,
            baseline_context_s: 10.0,
            merge: MergeMode::Probability,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_manifest: Option<PathBuf>,
    /// Vocabulary file; the built-in character vocabulary when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    pub norm_scope: NormScope,
    /// Parent directory of sweep run directories.
    pub runs_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumSchedule,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.curriculum.validate()?;
        let f = self.eval.stride_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("stride_fraction must lie in (0, 1], got {f}")));
        }
        if !(self.eval.baseline_context_s > 0.0) {
            return Err(Error::Config("baseline_context_s must be positive".into()));
        }
        Ok(())
    }

    /// Parses, resolves relative paths against the file's directory and
    /// checks that referenced inputs exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.train_manifest);
        resolve(&mut cfg.data.runs_dir);
        if let Some(p) = cfg.data.eval_manifest.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.data.vocab.as_mut() {
            resolve(p);
        }
        let inputs = [
            Some(&cfg.data.train_manifest),
            cfg.data.eval_manifest.as_ref(),
            cfg.data.vocab.as_ref(),
        ];
        for p in inputs.into_iter().flatten() {
            if !p.as_os_str().is_empty() && !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[encoder]\nn_layers = 2\npos_scheme = \"sinusoidal\"\n").unwrap();
        assert_eq!(cfg.encoder.n_layers, 2);
        assert_eq!(cfg.encoder.d_model, 128);
        assert_eq!(cfg.eval.stride_fraction, 0.125);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml_str("[eval]\nstride_fraction = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[encoder]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[encoder]\nn_heads = 3\n").is_err());
    }
}
