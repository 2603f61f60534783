//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys
//! are namespaced (`model.*`, `train.*`, `noise.*`, `paths.*`); unknown or
//! repeated keys are errors. Model and optimiser keys fall back to the
//! library defaults when absent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::noise::NoiseSpec;
use crate::train::TrainConfig;

pub const KNOWN_KEYS: &[&str] = &[
    "model.channels",
    "model.latent",
    "model.width",
    "model.blocks",
    "model.heads",
    "model.gate_width",
    "model.pse_blocks",
    "model.pse_width",
    "model.pse_hidden",
    "model.steps",
    "model.beta_start",
    "model.beta_end",
    "model.mlp_hidden",
    "model.time_dim",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.ema_decay",
    "train.total_steps",
    "train.batch",
    "train.patch",
    "train.patch_schedule",
    "train.alpha_rec",
    "train.alpha_sc",
    "train.alpha_diff",
    "train.lr_halving",
    "train.checkpoint_every",
    "train.seed",
    "noise.spec",
    "paths.train_dir",
    "paths.eval_noisy_dir",
    "paths.eval_clean_dir",
    "paths.checkpoint",
    "paths.log",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    i + 1
                ))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if v.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key `{k}` has no value",
                    i + 1
                )));
            }
            if entries.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: key `{k}` given twice",
                    i + 1
                )));
            }
        }
        Ok(Self { entries })
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_owned(), value.into());
        Ok(())
    }

    /// Fails naming the first absent key.
    pub fn require_keys(&self, keys: &[&str]) -> Result<()> {
        match keys.iter().find(|k| !self.entries.contains_key(**k)) {
            Some(k) => Err(Error::Config(format!("missing required key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.require_keys(&[key])?;
        Ok(PathBuf::from(&self.entries[key]))
    }

    fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            channels: self.or("model.channels", d.channels)?,
            latent: self.or("model.latent", d.latent)?,
            width: self.or("model.width", d.width)?,
            blocks: self.or("model.blocks", d.blocks)?,
            heads: self.or("model.heads", d.heads)?,
            gate_width: self.or("model.gate_width", d.gate_width)?,
            pse_blocks: self.or("model.pse_blocks", d.pse_blocks)?,
            pse_width: self.or("model.pse_width", d.pse_width)?,
            pse_hidden: self.or("model.pse_hidden", d.pse_hidden)?,
            steps: self.or("model.steps", d.steps)?,
            beta_start: self.or("model.beta_start", d.beta_start)?,
            beta_end: self.or("model.beta_end", d.beta_end)?,
            mlp_hidden: self.or("model.mlp_hidden", d.mlp_hidden)?,
            time_dim: self.or("model.time_dim", d.time_dim)?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Training settings; `train.total_steps` is required.
    pub fn train_config(&self) -> Result<TrainConfig> {
        self.require_keys(&["train.total_steps"])?;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr: self.or("train.lr", d.lr)?,
            beta1: self.or("train.beta1", d.beta1)?,
            beta2: self.or("train.beta2", d.beta2)?,
            adam_eps: self.or("train.adam_eps", d.adam_eps)?,
            ema_decay: self.or("train.ema_decay", d.ema_decay)?,
            total_steps: self.or("train.total_steps", d.total_steps)?,
            batch: self.or("train.batch", d.batch)?,
            patch: self.or("train.patch", d.patch)?,
            patch_schedule: self.patch_schedule()?,
            weights: LossWeights {
                rec: self.or("train.alpha_rec", d.weights.rec)?,
                sc: self.or("train.alpha_sc", d.weights.sc)?,
                diff: self.or("train.alpha_diff", d.weights.diff)?,
            },
            lr_halving: self.parsed("train.lr_halving")?,
            seed: self.or("train.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `train.patch_schedule = 0:32, 2000:64` as `(first_step, patch)` pairs.
    fn patch_schedule(&self) -> Result<Vec<(u64, usize)>> {
        let Some(v) = self.get("train.patch_schedule") else {
            return Ok(Vec::new());
        };
        let bad = || Error::Config(format!("key `train.patch_schedule`: cannot parse {v:?}"));
        v.split(',')
            .map(|entry| {
                let (step, patch) = entry.split_once(':').ok_or_else(bad)?;
                Ok((
                    step.trim().parse().map_err(|_| bad())?,
                    patch.trim().parse().map_err(|_| bad())?,
                ))
            })
            .collect()
    }

    /// Steps between intermediate checkpoints; `None` writes only the final.
    pub fn checkpoint_every(&self) -> Result<Option<u64>> {
        match self.parsed::<u64>("train.checkpoint_every")? {
            Some(0) => Err(Error::Config(
                "key `train.checkpoint_every` must be positive".into(),
            )),
            v => Ok(v),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.or("train.seed", 0)
    }

    pub fn noise(&self) -> Result<Option<NoiseSpec>> {
        self.get("noise.spec")
            .map(|v| {
                v.parse::<NoiseSpec>()
                    .map_err(|e| Error::Config(format!("key `noise.spec`: {e}")))
            })
            .transpose()
    }
}
