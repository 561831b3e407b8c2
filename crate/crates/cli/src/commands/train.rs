//! `wasi train`: one training run, written as `run.csv`, `run.json` and a
//! checkpoint directory.

use clap::Args;
use wasi_core::harness::{run_model, write_checkpoint, AsiRefresh, Mode, PlanSource, TrainConfig};
use wasi_core::WsiVariant;

use super::{out_dir, Failure, ModelArgs};
use crate::config::Config;
use crate::GlobalArgs;

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// `wasi`, `wsi-only`, `asi-only`, `vanilla` or `svd-every-step`.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Explained-variance threshold for the weight rank.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Keep every activation mode at full rank.
    #[arg(long, conflicts_with_all = ["budget", "perplexity_target", "act_eps"])]
    pub full_ranks: bool,
    /// Activation ranks from HOSVD at this threshold.
    #[arg(long, conflicts_with_all = ["budget", "perplexity_target"])]
    pub act_eps: Option<f64>,
    /// Activation ranks from a scan under this memory budget.
    #[arg(long, conflicts_with = "perplexity_target")]
    pub budget: Option<u64>,
    /// Activation ranks from a scan under this perplexity target.
    #[arg(long)]
    pub perplexity_target: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Gradient clip threshold; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Constant learning rate instead of cosine annealing.
    #[arg(long)]
    pub no_cosine: bool,
    /// Use `R = rtᵀ` rather than the refreshed right factor.
    #[arg(long)]
    pub verbatim: bool,
    /// Recompute ASI factors once per epoch instead of every step.
    #[arg(long)]
    pub asi_per_epoch: bool,
    /// Skip writing the checkpoint.
    #[arg(long)]
    pub no_checkpoint: bool,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode {s:?}; expected wasi, wsi-only, asi-only, vanilla or svd-every-step"))
}

pub fn config(global: &GlobalArgs, cfg: &Config, a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut tc = cfg.train_config()?;
    tc.seed = cfg.seed(global.seed)?;
    if let Some(m) = a.mode {
        tc.mode = m;
    }
    macro_rules! take {
        ($($field:ident <- $flag:ident),*) => { $(if let Some(v) = a.$flag { tc.$field = v; })* };
    }
    take!(epsilon <- eps, epochs <- epochs, pretrain_epochs <- pretrain_epochs, batch_size <- batch_size,
          lr <- lr, momentum <- momentum, weight_decay <- weight_decay);
    if let Some(c) = a.clip {
        tc.clip_norm = (c > 0.0).then_some(c);
    }
    if a.full_ranks {
        tc.activation_plan = PlanSource::Full;
    } else if let Some(e) = a.act_eps {
        tc.activation_plan = PlanSource::Threshold(e);
    } else if let Some(b) = a.budget {
        tc.activation_plan = PlanSource::Budget(b);
    } else if let Some(t) = a.perplexity_target {
        tc.activation_plan = PlanSource::Target(t);
    }
    if a.no_cosine {
        tc.cosine = false;
    }
    if a.verbatim {
        tc.wsi_variant = WsiVariant::Verbatim;
    }
    if a.asi_per_epoch {
        tc.asi_refresh = AsiRefresh::PerEpoch;
    }
    if let Some(t) = global.threads {
        tc.threads = t;
    }
    tc.validate()?;
    Ok(tc)
}

pub fn run(global: &GlobalArgs, cfg: &Config, args: TrainArgs) -> Result<(), Failure> {
    let tc = config(global, cfg, &args)?;
    let (data, spec, source) = args.model.load(cfg, tc.seed)?;
    let dir = out_dir(&global.out)?;
    let (record, model) = run_model(&spec, &data, &source, &tc)?;
    record.write_files(&dir)?;
    if !args.no_checkpoint {
        write_checkpoint(&dir.join("checkpoint"), &model, &tc)?;
    }
    let last = record.final_epoch();
    println!(
        "epochs {} train_accuracy {} val_accuracy {} flops {}",
        record.epochs.len(),
        last.train_accuracy,
        last.val_accuracy,
        record.total.flops()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse() {
        assert_eq!(parse_mode("svd-every-step").unwrap(), Mode::SvdEveryStep);
        assert_eq!(parse_mode("vanilla").unwrap(), Mode::Vanilla);
        assert!(parse_mode("dense").is_err());
    }
}
