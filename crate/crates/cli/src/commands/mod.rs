pub mod cost;
pub mod decompose;
pub mod plan;
pub mod train;

use std::path::{Path, PathBuf};

use clap::Args;
use wasi_core::harness::{load_dataset, DataOptions, ModelKind, ModelSpec, Split};

use crate::config::Config;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const USAGE: u8 = 2;
pub const INFEASIBLE: u8 = 3;
pub const NUMERIC: u8 = 4;

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Failure {
        Failure { code: USAGE, error: anyhow::anyhow!(msg.into()) }
    }
}

impl From<wasi_core::Error> for Failure {
    fn from(e: wasi_core::Error) -> Failure {
        use wasi_core::Error as E;
        let code = match &e {
            E::Infeasible(_) => INFEASIBLE,
            E::NonFinite(_) | E::NonFiniteLoss { .. } => NUMERIC,
            _ => USAGE,
        };
        Failure { code, error: e.into() }
    }
}

/// `4x4x6` or `4,4,6`.
pub fn parse_dims(s: &str) -> Result<Vec<usize>, Failure> {
    let dims: Result<Vec<usize>, _> = s.split(['x', ',']).map(|p| p.trim().parse::<usize>()).collect();
    match dims {
        Ok(d) if !d.is_empty() && d.iter().all(|&x| x > 0) => Ok(d),
        _ => Err(Failure::usage(format!("expected positive extents like 4x4x6, got {s:?}"))),
    }
}

pub fn out_dir(dir: &Path) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

/// Data and model selection shared by `plan` and `train`.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// `synthetic:<preset or key=value list>`, a CSV file, or `images.idx,labels.idx`.
    #[arg(long)]
    pub data: Option<String>,
    /// Reshape each sample to these token extents, e.g. `16x8`.
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// `mlp`, `block` or `windowed`.
    #[arg(long)]
    pub model: Option<ModelKindArg>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

impl ModelArgs {
    pub fn load(&self, cfg: &Config, seed: u64) -> Result<(Split, ModelSpec, String), Failure> {
        let source = self
            .data
            .clone()
            .or_else(|| cfg.data.source.clone())
            .ok_or_else(|| Failure::usage("no data source: pass --data or set [data] source"))?;
        let sample_shape = match &self.shape {
            Some(s) => Some(parse_dims(s)?),
            None => cfg.data.shape.clone(),
        };
        let options = DataOptions { sample_shape, classes: self.classes.or(cfg.data.classes) };
        let data = load_dataset(&source, &options, seed)?;
        let mut spec = cfg.model.clone().unwrap_or_default();
        if let Some(ModelKindArg(k)) = self.model {
            spec.kind = k;
            if k == ModelKind::Block && self.hidden.is_none() && spec.hidden.len() != 1 {
                spec.hidden.truncate(1);
            }
        }
        if let Some(h) = &self.hidden {
            spec.hidden = h.clone();
        }
        Ok((data, spec, source))
    }
}

impl clap::ValueEnum for ModelKindArg {
    fn value_variants<'a>() -> &'a [Self] {
        &[ModelKindArg(ModelKind::Mlp), ModelKindArg(ModelKind::Block), ModelKindArg(ModelKind::Windowed)]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self.0 {
            ModelKind::Mlp => "mlp",
            ModelKind::Block => "block",
            ModelKind::Windowed => "windowed",
        }))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelKindArg(pub ModelKind);
