use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization protocol: Adam with a step schedule that halves the
/// learning rate every `halve_every` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch mini-batch shuffle.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            lr0: 0.01,
            halve_every: 20,
            batch_size: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.halve_every == 0 {
            return fail("batch_size and halve_every must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 {} must be finite and positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!(
                "Adam betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("Adam eps {} must be finite and positive", self.eps));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            what: "train config".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes to TOML")
    }
}

/// `lr0 · 0.5^⌊epoch / halve_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = epoch / cfg.halve_every.max(1);
    cfg.lr0 * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}
