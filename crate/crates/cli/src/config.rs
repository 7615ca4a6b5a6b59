use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crdnet::model::ModelConfig;
use crdnet::synth::SynthConfig;
use crdnet::train::TrainConfig;
use crdnet::Float;
use serde::{Deserialize, Serialize};

/// Everything one experiment needs, stored as pretty JSON.
///
/// `seed` drives synthesis, the train/test split, model initialization and
/// training; `train.seed` is overwritten by it when the config is resolved.
/// Relative paths are resolved against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Gaussian width for ground-truth density maps, in pixels.
    pub sigma: Float,
    /// Number of scenes `synth` generates.
    pub scenes: usize,
    pub test_fraction: Float,
    /// Zero negative density values before counting during evaluation.
    pub clamp_counts: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            sigma: 4.0,
            scenes: 200,
            test_fraction: 0.25,
            clamp_counts: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_file(path, self.to_json().as_bytes())
    }

    /// Applies command-line overrides and checks the result.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(out) = out {
            self.output_dir = out.to_path_buf();
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            bail!("sigma must be positive, got {}", self.sigma);
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            bail!("test_fraction must lie in [0, 1), got {}", self.test_fraction);
        }
        self.model.backbone.validate()?;
        self.synth.validate()?;
        self.train.validate(self.model.backbone.input_multiple())?;
        Ok(())
    }

    pub fn density_dir(&self) -> PathBuf {
        self.data_dir.join("density")
    }
}
