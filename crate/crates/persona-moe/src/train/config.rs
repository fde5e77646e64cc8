//! Run configuration: one TOML document covering model, adapters, router,
//! and the per-stage optimizer settings. Defaults carry the reference
//! hyperparameters; `desk()` shrinks step counts for minutes-scale runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::LoraConfig;
use crate::lm::ModelConfig;
use crate::router::{EncoderConfig, RouterConfig};

/// Optimizer settings for one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
}

impl Default for StageHyper {
    fn default() -> Self {
        StageHyper { steps: 100, batch_size: 8, grad_accum: 1, lr: 1e-3 }
    }
}

impl StageHyper {
    fn validate(&self, stage: &str) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config(format!("{stage}: steps, batch_size, grad_accum must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{stage}: lr must be positive and finite")));
        }
        Ok(())
    }
}

/// Full training configuration. Serialized into every checkpoint manifest
/// and written, resolved, next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seed: u64,
    /// Weight of the router term inside the joint loss.
    pub gamma: f64,
    /// Fraction of records held out for per-stage evaluation.
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    pub router: RouterConfig,
    /// Base-model warm-up on neutral responses; runs before stage 1 and is
    /// the last time base weights change.
    pub prep: StageHyper,
    pub stage1: StageHyper,
    pub stage2: StageHyper,
    pub stage3: StageHyper,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 0,
            gamma: 0.2,
            val_fraction: 0.1,
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            lora: LoraConfig::default(),
            router: RouterConfig::default(),
            prep: StageHyper { steps: 400, batch_size: 8, grad_accum: 1, lr: 3e-3 },
            stage1: StageHyper { steps: 1000, batch_size: 32, grad_accum: 8, lr: 1e-4 },
            stage2: StageHyper { steps: 500, batch_size: 64, grad_accum: 1, lr: 1e-4 },
            stage3: StageHyper { steps: 300, batch_size: 32, grad_accum: 1, lr: 1e-5 },
        }
    }
}

impl TrainingConfig {
    /// Minutes-scale preset: reference architecture, shortened schedules.
    pub fn desk() -> Self {
        TrainingConfig {
            prep: StageHyper { steps: 300, batch_size: 8, grad_accum: 1, lr: 3e-3 },
            stage1: StageHyper { steps: 150, batch_size: 16, grad_accum: 1, lr: 2e-3 },
            stage2: StageHyper { steps: 400, batch_size: 32, grad_accum: 1, lr: 3e-4 },
            stage3: StageHyper { steps: 40, batch_size: 8, grad_accum: 1, lr: 1e-4 },
            ..TrainingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder.validate()?;
        self.lora.validate()?;
        self.router.validate()?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.model.vocab != self.encoder.vocab {
            return Err(Error::Config("model and encoder must share one vocabulary".into()));
        }
        self.prep.validate("prep")?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.stage3.validate("stage3")?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
