//! Experiment configuration file: `[train]`, `[grow]`, `[model]` and
//! `[scene]` tables, all optional, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grow::GrowParams;
use crate::nn::ModelConfig;
use crate::synth::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Side of the square training tiles; a multiple of the encoder stride.
    pub patch_size: usize,
    /// Fraction of patches used for training.
    pub split: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Epochs between pseudo-label refreshes.
    pub refresh_k: usize,
    pub lambda_a: f64,
    /// Weight of the spatial loss; 0 with `densify = false` removes the
    /// spatial branch from training.
    pub lambda_s: f64,
    pub densify: bool,
    pub augment: bool,
    /// Probability that a training tile is decoded without its prompts,
    /// matching prediction on unannotated areas.
    pub prompt_dropout: f64,
    /// Validation is scored every this many epochs (0: only at the end).
    pub val_every: usize,
    pub seed: u64,
    /// Single worker; results are identical either way, this only removes
    /// scheduling from the picture.
    pub deterministic: bool,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            split: 0.8,
            epochs: 50,
            batch: 1,
            lr: 1.5e-3,
            weight_decay: 4e-5,
            clip_norm: 5.0,
            refresh_k: 5,
            lambda_a: 1.0,
            lambda_s: 1.0,
            densify: true,
            augment: true,
            prompt_dropout: 0.5,
            val_every: 0,
            seed: 0,
            deterministic: false,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.patch_size % ModelConfig::STRIDE != 0 {
            return bad(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size,
                ModelConfig::STRIDE
            ));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split {} outside (0, 1)", self.split));
        }
        if self.batch == 0 || self.refresh_k == 0 {
            return bad("batch and refresh_k must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("lr must be positive, weight_decay and clip_norm non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return bad(format!("prompt_dropout {} outside [0, 1]", self.prompt_dropout));
        }
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_s", self.lambda_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub train: TrainConfig,
    pub grow: GrowParams,
    pub model: ModelConfig,
    pub scene: SceneConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is representable in TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks the training, growing and model sections.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.grow.validate()?;
        self.model.validate()
    }
}
