//! Low-rank training engine for linear layers.
//!
//! Weights live as rank-`K` factors `L · R` maintained by one warm-started
//! subspace-iteration step per update ([`weight`]); layer inputs are cached as
//! Tucker approximations refreshed the same way ([`activation`]). Forward and
//! backward passes run directly on those factors ([`autodiff`]). Activation
//! ranks are chosen before training from a gradient-error table
//! ([`rank_select`]) and every kernel reports its arithmetic to thread-local
//! [`counters`], which [`cost`] reconciles against closed-form FLOP and memory
//! counts. [`harness`] trains small classifiers end to end.

pub mod activation;
pub mod autodiff;
pub mod cost;
pub mod counters;
pub mod error;
pub mod harness;
pub mod json;
pub mod linalg;
pub mod matrix;
pub mod numdiff;
pub mod rank_select;
pub mod tensor;
pub mod weight;

pub use activation::{asi_step, hosvd, reconstruct_tucker, TuckerActivation, TuckerSpec};
pub use autodiff::{
    forward_dense, forward_lowrank, grad_input_dense, grad_input_lowrank, grad_weight_dense,
    grad_weight_lowrank, grad_weight_lowrank_3d, grad_weight_lowrank_4d, LayerTape,
};
pub use cost::{CostReport, LayerShape};
pub use counters::OpCounts;
pub use error::{Error, Result};
pub use linalg::{orthogonalize, svd, truncated_svd, Svd, TruncatedSvd};
pub use matrix::Matrix;
pub use numdiff::finite_difference_gradient;
pub use rank_select::{activation_memory, PerplexityTable, RankPlan};
pub use tensor::Tensor;
pub use weight::{apply_update, reconstruct, wsi_init, wsi_step, LowRankWeight, UpdateSign, WsiVariant};
