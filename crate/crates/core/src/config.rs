//! The run configuration file: `[model]`, `[train]`, `[data]` and `[loss]`
//! tables of TOML. Every table and key is optional and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{segment_samples, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Fraction of the cycle spent ramping up.
    pub warmup: f64,
    /// Restart the one-cycle schedule every epoch instead of spanning the run.
    pub cycle_per_epoch: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub segment_seconds: f64,
    pub hop_seconds: f64,
    /// Random speed change of each utterance per epoch.
    pub tempo: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            seed: 0,
            lr_min: 1e-5,
            lr_max: 1e-2,
            warmup: 0.3,
            cycle_per_epoch: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            segment_seconds: 4.0,
            hop_seconds: 3.0,
            tempo: true,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig { lr_min: self.lr_min, lr_max: self.lr_max, warmup: self.warmup }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Segment and hop in samples.
    pub fn segment_samples(&self) -> Result<(usize, usize)> {
        segment_samples(self.segment_seconds, self.hop_seconds, SAMPLE_RATE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.schedule().validate()?;
        self.adam().validate()?;
        self.segment_samples()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub noisy_dir: Option<PathBuf>,
    pub clean_dir: Option<PathBuf>,
    pub valid_noisy_dir: Option<PathBuf>,
    pub valid_clean_dir: Option<PathBuf>,
    /// Checkpoints and the training log go here.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Structural checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.data.valid_noisy_dir.is_some() != self.data.valid_clean_dir.is_some() {
            return Err(Error::Config("valid_noisy_dir and valid_clean_dir must be given together".into()));
        }
        Ok(())
    }

    /// Also requires the training directories to be set and to exist.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        let d = &self.data;
        for (key, dir) in [
            ("noisy_dir", &d.noisy_dir),
            ("clean_dir", &d.clean_dir),
            ("valid_noisy_dir", &d.valid_noisy_dir),
            ("valid_clean_dir", &d.valid_clean_dir),
        ] {
            match dir {
                None if key.starts_with("valid") => {}
                None => return Err(Error::Config(format!("data.{key} is required for training"))),
                Some(p) if !p.is_dir() => {
                    return Err(Error::Config(format!("data.{key}: {} is not a directory", p.display())))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}
