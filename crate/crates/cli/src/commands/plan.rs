//! `wasi plan`: perplexity scan on a held-out batch, then rank selection.

use clap::Args;
use wasi_core::harness::train::held_out_batch;
use wasi_core::harness::{build_model, pretrain, resolve_plan, Mode, PlanSource, TrainConfig};

use super::{out_dir, Failure, ModelArgs};
use crate::config::Config;
use crate::GlobalArgs;

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Largest total activation memory, in stored elements.
    #[arg(long, conflicts_with = "perplexity_target")]
    pub budget: Option<u64>,
    /// Largest total perplexity.
    #[arg(long)]
    pub perplexity_target: Option<f64>,
    /// Thresholds to scan, comma separated, ascending in (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Held-out batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dense epochs to train before scanning.
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
}

pub fn run(global: &GlobalArgs, cfg: &Config, args: PlanArgs) -> Result<(), Failure> {
    let source = match (args.budget, args.perplexity_target) {
        (Some(b), None) => PlanSource::Budget(b),
        (None, Some(t)) => PlanSource::Target(t),
        (None, None) => match (cfg.plan.budget, cfg.plan.perplexity_target) {
            (Some(b), None) => PlanSource::Budget(b),
            (None, Some(t)) => PlanSource::Target(t),
            (Some(_), Some(_)) => return Err(Failure::usage("[plan] sets both budget and perplexity_target")),
            (None, None) => return Err(Failure::usage("pass --budget or --perplexity-target")),
        },
        (Some(_), Some(_)) => return Err(Failure::usage("--budget and --perplexity-target are exclusive")),
    };
    let seed = cfg.seed(global.seed)?;
    let base = cfg.train_config()?;
    let tc = TrainConfig {
        mode: Mode::Wasi,
        activation_plan: source,
        plan_thresholds: args.thresholds.unwrap_or(base.plan_thresholds.clone()),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        pretrain_epochs: args.pretrain_epochs.unwrap_or(base.pretrain_epochs),
        threads: global.threads.unwrap_or(base.threads),
        seed,
        ..base
    };
    tc.validate()?;
    let (data, spec, name) = args.model.load(cfg, seed)?;
    let model = if tc.pretrain_epochs > 0 {
        let (dense, _) = pretrain(&spec, &data, &name, &tc)?;
        dense.convert(Mode::Wasi, tc.epsilon, seed)?
    } else {
        build_model(&spec, Mode::Wasi, tc.epsilon, &data.train.sample_shape, data.train.classes, seed)?
    };
    let (x, labels) = held_out_batch(&data.train, tc.batch_size, seed)?;
    let resolved = resolve_plan(&model, &tc, &x, &labels)?;
    let (table, plan) = (resolved.table.expect("scan ran"), resolved.plan.expect("plan selected"));

    let dir = out_dir(&global.out)?;
    wasi_core::json::to_file(&dir.join("perplexity_table.json"), &table)?;
    wasi_core::json::to_file(&dir.join("rank_plan.json"), &plan)?;
    println!(
        "thresholds {:?} memory {} perplexity {} ranks {:?}",
        plan.threshold_indices.iter().map(|&j| table.thresholds[j]).collect::<Vec<_>>(),
        plan.memory,
        plan.perplexity,
        plan.ranks
    );
    Ok(())
}
