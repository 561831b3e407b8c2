use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, PlanSource, TrainConfig};
use super::data::{Dataset, Split};
use super::model::{build_model, cross_entropy, HeldOutProbe, LayerMemory, Model, ModelSpec, StepCtx, UpdateCtx};
use crate::activation::{check_ranks, hosvd, rank_bounds, TuckerSpec};
use crate::counters::{self, OpCounts};
use crate::error::{Error, Result};
use crate::rank_select::{perplexity_scan_threaded, select_budget, select_perplexity_target, PerplexityTable, RankPlan};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Counted arithmetic of this epoch's training steps.
    pub mults: u64,
    pub adds: u64,
    pub flops: u64,
    /// Weight rank per compressed layer at the end of the epoch.
    pub weight_ranks: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub model: ModelSpec,
    pub seed: u64,
    pub data: String,
    /// Dense pretraining epochs, before conversion to the run's mode.
    pub pretrain: Vec<EpochRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Training loss of every step, in order.
    pub step_losses: Vec<f64>,
    /// `k_trajectory[step][layer]`, weight ranks after each update.
    pub k_trajectory: Vec<Vec<Option<usize>>>,
    /// ASI ranks in force, per layer.
    pub activation_ranks: Option<Vec<Vec<usize>>>,
    pub perplexity_table: Option<PerplexityTable>,
    pub rank_plan: Option<RankPlan>,
    /// Stored elements after the last step.
    pub layers: Vec<LayerMemory>,
    pub total: OpCounts,
    /// Seconds since the Unix epoch at completion; excluded from comparisons.
    pub timestamp: u64,
}

impl RunRecord {
    pub fn final_epoch(&self) -> &EpochRecord {
        self.epochs.last().expect("a run has at least one epoch")
    }

    /// Equality ignoring the timestamp.
    pub fn same_run(&self, other: &RunRecord) -> bool {
        RunRecord { timestamp: 0, ..self.clone() } == RunRecord { timestamp: 0, ..other.clone() }
    }

    pub const CSV_HEADER: &'static str =
        "epoch,lr,train_loss,train_accuracy,val_loss,val_accuracy,mults,adds,flops,weight_ranks";

    /// One row per epoch; weight ranks joined by `;`, `-` for dense layers.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let header: Vec<&str> = Self::CSV_HEADER.split(',').collect();
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.epochs {
            let ranks: Vec<String> =
                e.weight_ranks.iter().map(|k| k.map_or_else(|| "-".to_string(), |k| k.to_string())).collect();
            w.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.lr),
                format!("{:e}", e.train_loss),
                format!("{:e}", e.train_accuracy),
                format!("{:e}", e.val_loss),
                format!("{:e}", e.val_accuracy),
                e.mults.to_string(),
                e.adds.to_string(),
                e.flops.to_string(),
                ranks.join(";"),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("run.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        crate::json::to_file(&dir.join("run.json"), self)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// A seeded batch from the training set, used only for rank planning.
pub fn held_out_batch(train: &Dataset, batch: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    if batch > train.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} exceeds the {} training samples",
            train.len()
        )));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x00e1_d0a7));
    idx.truncate(batch);
    Ok(train.batch(&idx))
}

/// Activation ranks chosen for a run, with the table and plan when a
/// search produced them.
#[derive(Clone, Debug, Default)]
pub struct ResolvedPlan {
    pub ranks: Option<Vec<Vec<usize>>>,
    pub table: Option<PerplexityTable>,
    pub plan: Option<RankPlan>,
}

/// Resolves the configured activation plan on the held-out batch.
pub fn resolve_plan(model: &Model, cfg: &TrainConfig, x: &Tensor, labels: &[usize]) -> Result<ResolvedPlan> {
    if !cfg.mode.compressed_activations() {
        return Ok(ResolvedPlan::default());
    }
    let b = x.shape()[0];
    let dims: Vec<Vec<usize>> = (0..model.layers().len()).map(|i| model.layer_input_dims(i, b)).collect();
    let probe = HeldOutProbe { model, x, labels };
    let mut out = ResolvedPlan::default();
    let mut ranks = match &cfg.activation_plan {
        PlanSource::Full => dims.iter().map(|d| rank_bounds(d)).collect(),
        PlanSource::Ranks(r) => r.clone(),
        PlanSource::Threshold(eps) => {
            let layers = crate::rank_select::ActivationProbe::probe(&probe)?;
            layers
                .iter()
                .map(|l| match hosvd(&l.activation, &TuckerSpec::Threshold(*eps)) {
                    Ok(t) => Ok(t.ranks().to_vec()),
                    Err(Error::ZeroInput) => Ok(vec![1; l.activation.order()]),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?
        }
        PlanSource::Budget(_) | PlanSource::Target(_) => {
            let table = perplexity_scan_threaded(&probe, &cfg.plan_thresholds, cfg.threads)?;
            let plan = match cfg.activation_plan {
                PlanSource::Budget(m) => select_budget(&table, m)?,
                PlanSource::Target(t) => select_perplexity_target(&table, t)?,
                _ => unreachable!(),
            };
            let r = plan.ranks.clone();
            out.table = Some(table);
            out.plan = Some(plan);
            r
        }
    };
    if ranks.len() != dims.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rank vectors for {} compressed layers",
            ranks.len(),
            dims.len()
        )));
    }
    for (r, d) in ranks.iter_mut().zip(&dims) {
        if !cfg.compress_batch_mode && !r.is_empty() {
            r[0] = d[0];
        }
        check_ranks(d, r)?;
    }
    out.ranks = Some(ranks);
    Ok(out)
}

fn weight_ranks(model: &Model) -> Vec<Option<usize>> {
    model.layers().iter().map(|l| l.rank()).collect()
}

fn evaluate(model: &mut Model, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let (l, acc) = model.evaluate(&x, &y)?;
        loss += l * chunk.len() as f64;
        correct += acc * chunk.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct / n))
}

/// One SGD step on a batch: forward with compressed caching, backward,
/// global clipping, update. Returns `(loss, correct)`. A non-finite loss is
/// reported before any update, with epoch and step left at zero.
pub fn train_step(model: &mut Model, cfg: &TrainConfig, x: &Tensor, y: &[usize], lr: f64, ctx: StepCtx) -> Result<(f64, usize)> {
    let logits = model.forward(x, ctx)?;
    let (loss, dlogits, correct) = cross_entropy(&logits, y);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: 0, loss });
    }
    model.backward(&dlogits)?;
    let norm = model.grad_norm();
    let grad_scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    model.update(&UpdateCtx {
        lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        sign: cfg.update_sign,
        variant: cfg.wsi_variant,
        grad_scale,
    })?;
    Ok((loss, correct))
}

/// Builds the model from `spec`, pretrains it densely if configured, then
/// trains it in the configured mode.
pub fn run(spec: &ModelSpec, data: &Split, source: &str, cfg: &TrainConfig) -> Result<RunRecord> {
    run_model(spec, data, source, cfg).map(|(r, _)| r)
}

/// Dense training of a fresh model for `cfg.pretrain_epochs`, converted to
/// `cfg.mode` afterwards. Stands in for a pretrained starting point.
pub fn pretrain(spec: &ModelSpec, data: &Split, source: &str, cfg: &TrainConfig) -> Result<(Model, Vec<EpochRecord>)> {
    let pre = TrainConfig { mode: Mode::Vanilla, epochs: cfg.pretrain_epochs, pretrain_epochs: 0, ..cfg.clone() };
    let mut dense = build_model(spec, Mode::Vanilla, 1.0, &data.train.sample_shape, data.train.classes, cfg.seed)?;
    let rec = train(&mut dense, data, source, &pre)?;
    Ok((dense, rec.epochs))
}

/// [`run`], also returning the trained model.
pub fn run_model(spec: &ModelSpec, data: &Split, source: &str, cfg: &TrainConfig) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    let (mut model, pretrained) = if cfg.pretrain_epochs > 0 {
        let (dense, epochs) = pretrain(spec, data, source, cfg)?;
        (dense.convert(cfg.mode, cfg.epsilon, cfg.seed)?, epochs)
    } else {
        let shape = &data.train.sample_shape;
        (build_model(spec, cfg.mode, cfg.epsilon, shape, data.train.classes, cfg.seed)?, vec![])
    };
    let mut rec = train(&mut model, data, source, cfg)?;
    rec.pretrain = pretrained;
    Ok((rec, model))
}

/// Trains `model` per `cfg` and records everything observable.
pub fn train(model: &mut Model, data: &Split, source: &str, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if data.train.sample_shape != model.sample_shape() {
        return Err(Error::Shape(format!(
            "model expects samples of {:?}, data has {:?}",
            model.sample_shape(),
            data.train.sample_shape
        )));
    }
    let b = cfg.batch_size;
    let steps = data.train.len() / b;
    if steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} exceeds the {} training samples",
            data.train.len()
        )));
    }

    let (hx, hy) = held_out_batch(&data.train, b, cfg.seed)?;
    let plan = resolve_plan(model, cfg, &hx, &hy)?;
    model.set_activation_ranks(plan.ranks.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps);
    let mut k_trajectory = Vec::with_capacity(cfg.epochs * steps);
    let mut total = OpCounts::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut ops = OpCounts::default();
        for step in 0..steps {
            let (x, y) = data.train.batch(&order[step * b..(step + 1) * b]);
            let ctx = StepCtx { refresh_factors: cfg.asi_refresh.refresh_on(step), ..StepCtx::TRAIN };
            let (res, counted) = counters::measure(|| train_step(model, cfg, &x, &y, lr, ctx));
            let (loss, c) = match res {
                Err(Error::NonFiniteLoss { loss, .. }) => return Err(Error::NonFiniteLoss { epoch, step, loss }),
                Err(Error::NonFinite(what)) => return Err(Error::NonFinite(format!("{what} at epoch {epoch}, step {step}"))),
                r => r?,
            };
            ops += counted;
            loss_sum += loss;
            correct += c;
            step_losses.push(loss);
            k_trajectory.push(weight_ranks(model));
        }
        total += ops;
        let (val_loss, val_accuracy) = evaluate(model, &data.valid, b)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            train_accuracy: correct as f64 / (steps * b) as f64,
            val_loss,
            val_accuracy,
            mults: ops.mults,
            adds: ops.adds,
            flops: ops.flops(),
            weight_ranks: weight_ranks(model),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} val {:.3} flops {}",
            rec.train_loss,
            rec.train_accuracy,
            rec.val_accuracy,
            rec.flops
        );
        epochs.push(rec);
    }

    Ok(RunRecord {
        config: cfg.clone(),
        model: model.spec().clone(),
        seed: cfg.seed,
        data: source.to_string(),
        pretrain: vec![],
        epochs,
        step_losses,
        k_trajectory,
        activation_ranks: plan.ranks,
        perplexity_table: plan.table,
        rank_plan: plan.plan,
        layers: model.layers().iter().map(|l| l.memory()).collect(),
        total,
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    })
}
