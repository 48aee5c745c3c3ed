//! `train.json` schema. Relative paths resolve against the directory that
//! holds the config file.

use std::path::{Path, PathBuf};

use glyphforge_core::autodiff::PoolMode;
use glyphforge_core::corpus::BatchSpec;
use glyphforge_core::model::ModelConfig;
use glyphforge_core::optim::AdamConfig;
use glyphforge_core::trainer::TrainConfig;
use glyphforge_core::wavelet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition_cache;
use crate::store::read_json;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size network (k = 256, wide channels).
    #[default]
    Standard,
    /// Narrow network for CPU-scale experiments.
    Toy,
}

/// Architecture preset with the commonly tuned fields overridable. Changing
/// `side` also resets the wavelet depth to the full depth of that side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<PoolMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelet_levels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            Preset::Standard => ModelConfig::default(),
            Preset::Toy => ModelConfig::toy(),
        };
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(side) = self.side {
            cfg.side = side;
            cfg.decoder_base_side = side >> cfg.decoder.len();
            cfg.wavelet_levels = wavelet::max_levels(side);
        }
        if let Some(p) = self.pooling {
            cfg.pooling = p;
        }
        if let Some(l) = self.wavelet_levels {
            cfg.wavelet_levels = l;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_steps() -> u64 {
    TrainConfig::default().steps
}

fn default_checkpoint_every() -> u64 {
    TrainConfig::default().checkpoint_every
}

fn default_dev_observations() -> usize {
    8
}

fn default_cache() -> PathBuf {
    PathBuf::from(partition_cache::DEFAULT_PATH)
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub version: u32,
    pub corpus: PathBuf,
    pub splits: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Defaults to `<checkpoint_dir>/metrics.jsonl`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
    #[serde(default = "default_cache")]
    pub partition_cache: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub batch: BatchSpec,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Observed glyphs per dev font when scoring the best-dev snapshot.
    #[serde(default = "default_dev_observations")]
    pub dev_observations: usize,
    /// Continue from `<checkpoint_dir>/latest.gfc` when it exists.
    #[serde(default = "yes")]
    pub resume: bool,
    #[serde(default)]
    pub model: ModelSpec,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: TrainFile = read_json(path)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::format(
                path,
                format!("config version {}, this build reads version {CONFIG_VERSION}", cfg.version),
            ));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.corpus, &mut cfg.splits, &mut cfg.checkpoint_dir, &mut cfg.partition_cache] {
            *p = base.join(&*p);
        }
        if let Some(m) = cfg.metrics.as_mut() {
            *m = base.join(&*m);
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            steps: self.steps,
            batch: self.batch,
            optimizer: self.optimizer,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| self.checkpoint_dir.join("metrics.jsonl"))
    }
}
