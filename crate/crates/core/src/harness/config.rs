//! Experiment configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graddiff::ModelConfig;

use super::data::SynthConfig;

/// JSON configuration shared by every CLI command. Missing keys take the
/// desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(rename = "N")]
    pub positions: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "K")]
    pub tokens: usize,
    #[serde(rename = "I")]
    pub iterations: usize,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Hidden width of the token-update MLP; `0` means `2C`.
    pub mlp_hidden: usize,
    /// Hidden width of the reliability-to-channel MLP; `0` means `C`.
    pub fusion_hidden: usize,
    pub batch_size: usize,
    pub separation: f64,
    pub view_noise: f64,
    pub exclusive_fraction: f64,
    pub corruption_prob: f64,
    pub corruption_noise: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 8,
            n_train: 512,
            n_test: 512,
            positions: 16,
            channels: 16,
            tokens: 16,
            iterations: 4,
            alpha_init: 0.5,
            beta_init: 0.5,
            epsilon: 1e-6,
            epochs: 300,
            lr: 1e-2,
            mlp_hidden: 0,
            fusion_hidden: 0,
            batch_size: 16,
            separation: 2.0,
            view_noise: 0.5,
            exclusive_fraction: 0.5,
            corruption_prob: 0.3,
            corruption_noise: 6.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        self.model().validate()?;
        self.synth().validate()
    }

    pub fn model(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.channels, self.num_classes);
        m.tokens = self.tokens;
        m.iterations = self.iterations;
        m.epsilon = self.epsilon;
        m.alpha_init = self.alpha_init;
        m.beta_init = self.beta_init;
        if self.mlp_hidden > 0 {
            m.mlp_hidden = self.mlp_hidden;
        }
        if self.fusion_hidden > 0 {
            m.fusion_hidden = self.fusion_hidden;
        }
        m
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.num_classes,
            n_train: self.n_train,
            n_test: self.n_test,
            positions: self.positions,
            channels: self.channels,
            separation: self.separation,
            view_noise: self.view_noise,
            exclusive_fraction: self.exclusive_fraction,
            corruption_prob: self.corruption_prob,
            corruption_noise: self.corruption_noise,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
