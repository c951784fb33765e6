use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::foundation::FoundationConfig;
use crate::model::ModelConfig;
use crate::synthworld::SplitMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub catalog_seed: u64,
    pub split_mode: SplitMode,
    pub split_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, catalog_seed: 0, split_mode: SplitMode::NfUc, split_fraction: 0.25, n_train: 1000, n_test: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// First epoch trained at the decayed rate; defaults to 2/3 of `epochs`.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, lr: 1e-4, lr_decay_epoch: None, lr_decay: 0.1, batch_size: 8, weight_decay: 1e-4, grad_clip: Some(1.0) }
    }
}

impl TrainConfig {
    pub fn decay_epoch(&self) -> usize {
        self.lr_decay_epoch.unwrap_or((2 * self.epochs).div_ceil(3))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub top_k: usize,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { top_k: 100, iou_threshold: 0.5 }
    }
}

/// Everything a run needs, read from TOML. Missing keys take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Model initialization and batch order.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub foundation: FoundationConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn with_queries(mut self, n_q: usize, n_f: usize) -> Self {
        self.model.detector.n_q = n_q;
        self.model.detector.n_f = n_f;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.lr_decay > 0.0) {
            return Err(Error::Config(format!("bad learning rate {} / decay {}", t.lr, t.lr_decay)));
        }
        if self.data.n_train == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        if self.eval.top_k == 0 || !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config("eval needs top_k > 0 and an IoU threshold in (0, 1]".into()));
        }
        Ok(())
    }
}
