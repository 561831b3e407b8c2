use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weight::{UpdateSign, WsiVariant};

/// Which representations a run keeps for weights and cached activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Dense weights, dense activations.
    Vanilla,
    /// Low-rank weights maintained by WSI, Tucker activations by ASI.
    #[default]
    Wasi,
    /// Low-rank weights, dense activations.
    WsiOnly,
    /// Dense weights, Tucker activations.
    AsiOnly,
    /// A dense master weight, truncated by a fresh SVD every step; Tucker
    /// activations as in `Wasi`.
    SvdEveryStep,
}

impl Mode {
    pub fn low_rank_weights(self) -> bool {
        matches!(self, Mode::Wasi | Mode::WsiOnly | Mode::SvdEveryStep)
    }

    pub fn compressed_activations(self) -> bool {
        matches!(self, Mode::Wasi | Mode::AsiOnly | Mode::SvdEveryStep)
    }
}

/// Where the per-layer activation ranks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanSource {
    /// Least perplexity with total activation memory at most this many elements.
    Budget(u64),
    /// Least activation memory with total perplexity at most this value.
    Target(f64),
    /// Explicit ranks, one vector per compressed layer.
    Ranks(Vec<Vec<usize>>),
    /// HOSVD at this explained-variance threshold on the held-out batch.
    Threshold(f64),
    /// Every mode at its unfolding bound (lossless).
    Full,
}

impl Default for PlanSource {
    fn default() -> Self {
        PlanSource::Threshold(0.9)
    }
}

/// How often ASI recomputes its mode factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsiRefresh {
    /// One warm-started pass every training step.
    #[default]
    PerIteration,
    /// One warm-started pass on the first step of each epoch; later steps in
    /// the epoch reuse those factors and only project the core.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Explained-variance threshold for the weight rank.
    pub epsilon: f64,
    pub activation_plan: PlanSource,
    /// Thresholds scanned when the plan comes from a budget or target.
    pub plan_thresholds: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub epochs: usize,
    /// Dense (vanilla) epochs run first; the trained weights are then
    /// converted to `mode`, standing in for a pretrained starting point.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub cosine: bool,
    pub seed: u64,
    pub wsi_variant: WsiVariant,
    pub update_sign: UpdateSign,
    pub asi_refresh: AsiRefresh,
    /// When false the batch mode is kept at full rank `B`.
    pub compress_batch_mode: bool,
    /// Workers for the perplexity scan.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::default(),
            epsilon: 0.9,
            activation_plan: PlanSource::default(),
            plan_thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0],
            lr: 0.05,
            momentum: 0.0,
            weight_decay: 1e-4,
            clip_norm: Some(2.0),
            epochs: 50,
            pretrain_epochs: 0,
            batch_size: 128,
            cosine: true,
            seed: 0,
            wsi_variant: WsiVariant::Refresh,
            update_sign: UpdateSign::Descent,
            asi_refresh: AsiRefresh::PerIteration,
            compress_batch_mode: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip norm must be positive, got {c}"));
            }
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        match &self.activation_plan {
            PlanSource::Threshold(e) if !(*e > 0.0 && *e <= 1.0) => {
                return bad(format!("activation threshold must lie in (0, 1], got {e}"));
            }
            PlanSource::Target(t) if t.is_nan() => return bad("perplexity target is NaN".into()),
            _ => {}
        }
        Ok(())
    }

    /// Learning rate for `epoch` (zero-based): cosine annealing from `lr`
    /// towards zero over the run, or constant.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.cosine {
            return self.lr;
        }
        let t = epoch as f64 / self.epochs as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.momentum, c.weight_decay, c.clip_norm), (0.05, 0.0, 1e-4, Some(2.0)));
        assert_eq!((c.batch_size, c.epochs, c.cosine), (128, 50, true));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = TrainConfig { epsilon: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.epsilon = 1.0;
        c.validate().unwrap();
        for f in [
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.lr = -1.0,
            |c: &mut TrainConfig| c.momentum = 1.0,
            |c: &mut TrainConfig| c.clip_norm = Some(0.0),
            |c: &mut TrainConfig| c.activation_plan = PlanSource::Threshold(1.5),
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn cosine_schedule() {
        let c = TrainConfig { epochs: 4, ..Default::default() };
        assert_eq!(c.lr_at(0), 0.05);
        assert!((c.lr_at(2) - 0.025).abs() < 1e-15);
        assert!(c.lr_at(3) < c.lr_at(2));
        let flat = TrainConfig { cosine: false, ..c };
        assert_eq!(flat.lr_at(3), 0.05);
    }

    #[test]
    fn serde_shapes() {
        let c = TrainConfig { activation_plan: PlanSource::Budget(100), ..Default::default() };
        let j = serde_json::to_string(&c).unwrap();
        assert!(j.contains("\"budget\":100") && j.contains("\"wsi_variant\":\"refresh\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&j).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"mode":"svd-every-step","epochs":3}"#).unwrap();
        assert_eq!(partial.mode, Mode::SvdEveryStep);
        assert_eq!(partial.lr, 0.05);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus":1}"#).is_err());
    }
}
