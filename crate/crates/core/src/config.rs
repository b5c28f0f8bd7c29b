use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::connector::ConnectorConfig;
use crate::dataset::TRAIN_STRIDE;
use crate::error::{Error, Result};
use crate::inpainter::InpainterConfig;
use crate::vae::VaeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vae,
    Inpainter,
    Connector,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Vae, Stage::Inpainter, Stage::Connector];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Inpainter => "inpainter",
            Stage::Connector => "connector",
        }
    }

    /// Stages whose checkpoints this one is trained against.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Vae => &[],
            Stage::Inpainter => &[Stage::Vae],
            Stage::Connector => &[Stage::Vae, Stage::Inpainter],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Settings shared by all three training stages, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Measures per step when training the VAE.
    pub measure_batch_size: usize,
    /// Context windows per step in stages I and II.
    pub window_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub kl_weight: f64,
    /// The KL weight ramps linearly from 0 over this many epochs.
    pub kl_warmup_epochs: usize,
    pub grad_clip: f64,
    /// Per-step probability of feeding the true previous latent in stage I.
    pub teacher_ratio: f64,
    pub validation_fraction: f64,
    pub train_stride: usize,
    /// Train the VAE on distinct measures only.
    pub unique_measures: bool,
    pub max_measures: Option<usize>,
    pub max_windows: Option<usize>,
    pub vae: VaeConfig,
    pub inpainter: InpainterConfig,
    pub connector: ConnectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.998,
            measure_batch_size: 64,
            window_batch_size: 32,
            max_epochs: 100,
            patience: 5,
            kl_weight: 0.1,
            kl_warmup_epochs: 10,
            grad_clip: 5.0,
            teacher_ratio: 0.5,
            validation_fraction: 0.1,
            train_stride: TRAIN_STRIDE,
            unique_measures: false,
            max_measures: None,
            max_windows: None,
            vae: VaeConfig::default(),
            inpainter: InpainterConfig::default(),
            connector: ConnectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.measure_batch_size == 0 || self.window_batch_size == 0 || self.train_stride == 0 {
            return fail("batch sizes and stride must be positive".into());
        }
        if self.kl_weight < 0.0 || self.grad_clip <= 0.0 {
            return fail("kl_weight must be non-negative and grad_clip positive".into());
        }
        for (name, p) in [
            ("teacher_ratio", self.teacher_ratio),
            ("validation_fraction", self.validation_fraction),
            ("connector.unmask_rate", self.connector.unmask_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.connector.heads == 0 || crate::vae::LATENT_DIM % self.connector.heads != 0 {
            return fail(format!("connector.heads {} must divide 256", self.connector.heads));
        }
        if self.inpainter.layers == 0 || self.inpainter.hidden == 0 {
            return fail("inpainter sizes must be positive".into());
        }
        Ok(())
    }

    /// KL weight used during training epoch `epoch` (1-based).
    pub fn kl_weight_at(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            self.kl_weight
        } else {
            self.kl_weight * (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}
