//! Run configuration (TOML) and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smgeo_core::model::ModelConfig;
use smgeo_core::optim::{AdamConfig, Schedule};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { kind: OptimizerKind::Adam, lr: a.lr, betas: (a.beta1, a.beta2), eps: a.eps, weight_decay: a.weight_decay }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.betas.0, beta2: self.betas.1, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Unset step counts are derived from the run length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_steps: Option<u64>,
    pub cosine_total_steps: Option<u64>,
    pub warmup_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { warmup_steps: None, cosine_total_steps: None, warmup_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dataset directory.
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Cap on optimizer steps per epoch, for smoke runs.
    pub max_steps_per_epoch: Option<usize>,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 25,
            batch_size: 8,
            dataset: PathBuf::from("data/desk"),
            checkpoint_dir: PathBuf::from("runs/desk"),
            grad_clip: Some(5.0),
            max_steps_per_epoch: None,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths are resolved against its directory and made absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.checkpoint_dir] {
            if p.is_relative() {
                *p = std::path::absolute(base.join(&*p)).map_err(|e| Error::io(p, e))?;
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Checks values; paths are checked by [`RunConfig::check_paths`].
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.optimizer.lr > 0.0) || !self.optimizer.lr.is_finite() {
            return bad(format!("optimizer.lr must be > 0, got {}", self.optimizer.lr));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_steps_per_epoch == Some(0) {
            return bad("max_steps_per_epoch must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        if !(0.0..=1.0).contains(&self.schedule.warmup_fraction) {
            return bad(format!("schedule.warmup_fraction must be in [0, 1], got {}", self.schedule.warmup_fraction));
        }
        if let (Some(w), Some(t)) = (self.schedule.warmup_steps, self.schedule.cosine_total_steps) {
            if w > t {
                return bad(format!("warmup_steps {w} exceeds cosine_total_steps {t}"));
            }
        }
        let (lo, hi) = self.augment.scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("augment.scale must satisfy 0 < lo <= hi, got {:?}", self.augment.scale));
        }
        self.optimizer.adam().validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// The dataset must exist; the checkpoint directory is created.
    pub fn check_paths(&self) -> Result<()> {
        if !self.dataset.is_dir() {
            return Err(Error::Config(format!("dataset directory {} does not exist", self.dataset.display())));
        }
        std::fs::create_dir_all(&self.checkpoint_dir).map_err(|e| Error::io(&self.checkpoint_dir, e))
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        let total = self.schedule.cosine_total_steps.unwrap_or((self.epochs * steps_per_epoch) as u64);
        let mut s = Schedule::with_warmup_fraction(self.optimizer.lr, total, self.schedule.warmup_fraction);
        if let Some(w) = self.schedule.warmup_steps {
            s.warmup_steps = w;
        }
        s
    }

    /// SHA-256 over every setting except the two paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = PathBuf::new();
        c.checkpoint_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
