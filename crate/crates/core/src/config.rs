//! Run configuration, read from and echoed as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSettings;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    pub ratios: Vec<f64>,
    pub spiral_lengths: Vec<usize>,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            ratios: vec![0.5; 4],
            spiral_lengths: vec![12; 4],
        }
    }
}

/// Starting learning rate for training runs. Batch-1 Adam at
/// [`crate::nn::BASE_LR`] collapses the decoder on the synthetic bodies.
pub const DEFAULT_LR: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Number of bone groups; must match the skeleton when set.
    pub k: Option<usize>,
    pub hierarchy: HierarchyConfig,
    pub model: ModelConfig,
    pub loss: LossSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            seed: 0,
            epochs: 300,
            batch_size: 1,
            lr: DEFAULT_LR,
            lr_decay: crate::nn::LR_DECAY,
            k: None,
            hierarchy: HierarchyConfig::default(),
            model: ModelConfig::default(),
            loss: LossSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("lr {} / decay {}", self.lr, self.lr_decay)));
        }
        let h = &self.hierarchy;
        if h.ratios.is_empty()
            || h.ratios.len() != h.spiral_lengths.len()
            || h.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0))
            || h.spiral_lengths.contains(&0)
        {
            return Err(Error::InvalidArgument(
                "hierarchy needs matching ratios in (0, 1] and positive spiral lengths".into(),
            ));
        }
        if self.k == Some(0) {
            return Err(Error::InvalidArgument("k must be ≥ 1".into()));
        }
        self.model.validate(h.ratios.len())?;
        self.loss.validate()
    }

    /// lr · decay^epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert_eq!(c.lr_at(0), DEFAULT_LR);
        assert_eq!(c.lr_at(2), DEFAULT_LR * 0.9f64.powi(2));
        let paper = RunConfig {
            lr: crate::nn::BASE_LR,
            ..c
        };
        assert_eq!(paper.lr_at(2), crate::nn::lr_schedule(2));
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = RunConfig::from_toml("epochs = 20\n[loss.weights]\nlambda_c = 0.0\n").unwrap();
        assert_eq!(c.epochs, 20);
        assert_eq!(c.loss.weights.lambda_c, 0.0);
        assert_eq!(c.loss.weights.lambda_s, 0.5);
        assert_eq!(c.model.beta_dim, 10);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("epochs = 0").is_err());
        assert!(RunConfig::from_toml("unknown_key = 1").is_err());
        assert!(RunConfig::from_toml("[hierarchy]\nratios = [0.5]\nspiral_lengths = [12]").is_err());
        assert!(RunConfig::from_toml("[loss.weights]\nlambda_e = -1.0").is_err());
    }
}
