//! Sectioned `key = value` config files. Every section is optional and every
//! key inside one is optional; command-line flags win over the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use wasi_core::harness::{ModelSpec, TrainConfig};

use crate::commands::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `synthetic:<spec>`, a CSV path, or `images.idx,labels.idx`.
    pub source: Option<String>,
    pub shape: Option<Vec<usize>>,
    pub classes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub budget: Option<u64>,
    pub perplexity_target: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub batch: Option<Vec<usize>>,
    /// Token extents per grid point, e.g. `["16", "4x4"]`.
    pub spatial: Option<Vec<String>>,
    /// `IxO` pairs.
    pub features: Option<Vec<String>>,
    pub weight_ranks: Option<Vec<usize>>,
    /// `full`, `match`, `uniform:<r>` or `fixed:<r1>x<r2>x...`.
    pub activation_ranks: Option<Vec<String>>,
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeSection {
    pub eps: Option<f64>,
    pub matrix: Option<PathBuf>,
    pub tensor: Option<PathBuf>,
    pub shape: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    train: toml::Table,
    pub model: Option<ModelSpec>,
    pub data: DataSection,
    pub plan: PlanSection,
    pub cost: CostSection,
    pub decompose: DecomposeSection,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, Failure> {
        let Some(path) = path else { return Ok(Config::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        cfg.train_config().map_err(|f| Failure { error: f.error.context(path.display().to_string()), ..f })?;
        Ok(cfg)
    }

    /// The `[train]` section over the built-in defaults.
    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        toml::Value::Table(self.train.clone())
            .try_into()
            .map_err(|e| Failure::usage(format!("[train]: {e}")))
    }

    /// Flag, then `[train] seed`, then `WASI_SEED`, then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, Failure> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if self.train.contains_key("seed") {
            return Ok(self.train_config()?.seed);
        }
        match std::env::var("WASI_SEED") {
            Ok(v) => v.trim().parse().map_err(|_| Failure::usage(format!("WASI_SEED is not an integer: {v:?}"))),
            Err(_) => Ok(0),
        }
    }
}
