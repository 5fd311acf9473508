//! Run configuration: one JSON document, every field defaulted, unknown keys
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mantra_core::backbone::BackboneConfig;
use mantra_core::data::{DriftScript, FeatureMode};
use mantra_core::ensemble::EnsembleConfig;
use mantra_core::model::ModelConfig;
use mantra_core::slow::SlowConfig;
use mantra_core::training::TrainConfig;
use mantra_core::urt::UrtConfig;

/// A generated stream used in place of a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub script: DriftScript,
    pub len: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file, relative to the config file.
    pub path: Option<PathBuf>,
    pub synth: Option<SynthSource>,
    /// Target column name; the last column when unset.
    pub target: Option<String>,
    pub features: FeatureMode,
    /// train : val : test.
    pub split: [f64; 3],
    pub stride: usize,
    /// Half-open row range `[start, end)` to keep before splitting.
    pub rows: Option<[usize; 2]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synth: None,
            target: None,
            features: FeatureMode::S,
            split: [0.7, 0.1, 0.2],
            stride: 1,
            rows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Used when `--out` is not given; relative to the config file.
    pub dir: Option<PathBuf>,
    /// Write `model.ckpt`.
    pub checkpoint: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            checkpoint: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// `in_dim`, `out_dim` and `target_index` are overwritten from the data.
    pub model: BackboneConfig,
    pub ensemble: EnsembleConfig,
    pub urt: UrtConfig,
    pub slow: SlowConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).context("invalid config")?;
        Ok(cfg)
    }

    /// Parses `path` and makes relative paths relative to its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = &cfg.data.path {
            cfg.data.path = Some(base.join(p));
        }
        if let Some(p) = &cfg.output.dir {
            cfg.output.dir = Some(base.join(p));
        }
        Ok(cfg)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.synth) {
            (None, None) => bail!("data needs either a path or a synth section"),
            (Some(_), Some(_)) => bail!("data.path and data.synth are mutually exclusive"),
            _ => {}
        }
        if let Some(s) = &self.data.synth {
            s.script.validate()?;
        }
        if self.data.stride == 0 {
            bail!("data.stride must be positive");
        }
        if let Some([a, b]) = self.data.rows {
            if a >= b {
                bail!("data.rows [{a}, {b}] is empty");
            }
        }
        self.model_config(self.model.in_dim, self.model.out_dim, self.model.target_index)
            .validate()?;
        self.slow.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn model_config(&self, in_dim: usize, out_dim: usize, target_index: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_dim,
                out_dim,
                target_index,
                ..self.model.clone()
            },
            ensemble: self.ensemble.clone(),
            urt: self.urt.clone(),
            seed: self.train.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = RunConfig::from_json("{\n  \"train\": {,}\n}").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn needs_a_data_source() {
        assert!(RunConfig::default().validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.path = Some("x.csv".into());
        cfg.validate().unwrap();
    }
}
