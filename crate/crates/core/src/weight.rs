//! Weight subspace iteration.
//!
//! A layer weight is held only as factors `L (O×K)` and `R (K×I)`. At
//! initialization they come from an ε-truncated SVD (`L = U_K Σ_K`,
//! `R = V_Kᵀ`). After each update the effective weight `W` is re-projected by
//! a single warm-started subspace-iteration step:
//!
//! ```text
//! Rᵀ = Wᵀ · L_prev
//! L  = orthogonalize(W · Rᵀ)
//! ```
//!
//! The rank `K` never changes after initialization.

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::linalg::{orthogonalize, truncated_svd};
use crate::matrix::Matrix;

/// Order of operations inside [`wsi_step`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WsiVariant {
    /// `R` is computed from the previous basis, `L` is then re-orthogonalized.
    #[default]
    Verbatim,
    /// As `Verbatim`, then `R = Lᵀ W` is recomputed from the new basis so that
    /// `L · R` is the orthogonal projection of `W` onto `span(L)`.
    Refresh,
}

/// Direction of the weight update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateSign {
    /// `W ← L·R − η·g` (gradient descent).
    #[default]
    Descent,
    /// `W ← L·R + η·g`, the sign taken literally from the update rule.
    Literal,
}

impl UpdateSign {
    pub fn factor(self) -> f64 {
        match self {
            UpdateSign::Descent => -1.0,
            UpdateSign::Literal => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankWeight {
    left: Matrix,
    right: Matrix,
    rank: usize,
    epsilon: f64,
    iteration: u64,
}

impl LowRankWeight {
    /// Assembles factors directly. `left` must be `O × K` and `right` `K × I`
    /// with `K ≤ min(O, I)`.
    pub fn from_factors(left: Matrix, right: Matrix, epsilon: f64, iteration: u64) -> Result<Self> {
        let k = left.cols();
        if right.rows() != k {
            return Err(Error::Shape(format!(
                "L has {k} columns but R has {} rows",
                right.rows()
            )));
        }
        if k > left.rows().min(right.cols()) {
            return Err(Error::Shape(format!(
                "rank {k} exceeds min({}, {})",
                left.rows(),
                right.cols()
            )));
        }
        Ok(Self {
            left,
            right,
            rank: k,
            epsilon,
            iteration,
        })
    }

    pub fn left(&self) -> &Matrix {
        &self.left
    }

    pub fn right(&self) -> &Matrix {
        &self.right
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn out_features(&self) -> usize {
        self.left.rows()
    }

    pub fn in_features(&self) -> usize {
        self.right.cols()
    }

    /// Stored elements, `K (I + O)`.
    pub fn stored_elements(&self) -> usize {
        self.left.len() + self.right.len()
    }

    /// The effective weight `L · R`.
    pub fn reconstruct(&self) -> Matrix {
        self.left.matmul(&self.right).expect("factor shapes checked at construction")
    }
}

/// Free-function form of [`LowRankWeight::reconstruct`].
pub fn reconstruct(lr: &LowRankWeight) -> Matrix {
    lr.reconstruct()
}

/// Factorizes `w` at the smallest rank explaining a fraction `epsilon` of its
/// energy; the iteration counter starts at zero.
pub fn wsi_init(w: &Matrix, epsilon: f64) -> Result<LowRankWeight> {
    let t = truncated_svd(w, epsilon)?;
    LowRankWeight::from_factors(t.left, t.right, epsilon, 0)
}

/// Dense effective weight `L·R ± η·g` for a subsequent [`wsi_step`].
pub fn apply_update(lr: &LowRankWeight, grad: &Matrix, eta: f64, sign: UpdateSign) -> Result<Matrix> {
    check_update(lr, grad, eta)?;
    lr.reconstruct().add_scaled(grad, sign.factor() * eta)
}

fn check_update(lr: &LowRankWeight, grad: &Matrix, eta: f64) -> Result<()> {
    if grad.shape() != (lr.out_features(), lr.in_features()) {
        return Err(Error::Shape(format!(
            "gradient is {}x{}, weight is {}x{}",
            grad.rows(),
            grad.cols(),
            lr.out_features(),
            lr.in_features()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("weight gradient".into()));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {eta}")));
    }
    Ok(())
}

/// A linear operator standing in for an effective weight `W (O×I)`.
pub trait EffectiveWeight {
    fn shape(&self) -> (usize, usize);
    /// `W · x` for `x` of shape `I × k`.
    fn apply(&self, x: &Matrix) -> Matrix;
    /// `Wᵀ · x` for `x` of shape `O × k`.
    fn apply_t(&self, x: &Matrix) -> Matrix;
}

impl EffectiveWeight for Matrix {
    fn shape(&self) -> (usize, usize) {
        Matrix::shape(self)
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        self.matmul(x).expect("shape checked by caller")
    }

    fn apply_t(&self, x: &Matrix) -> Matrix {
        self.tmatmul(x).expect("shape checked by caller")
    }
}

/// The updated weight `a · L·R + b · G` kept in factored form, so a WSI step
/// never materializes the dense `O × I` product `L·R`.
#[derive(Clone, Copy, Debug)]
pub struct FactoredUpdate<'a> {
    pub base: &'a LowRankWeight,
    pub base_scale: f64,
    pub grad: &'a Matrix,
    pub grad_scale: f64,
}

impl<'a> FactoredUpdate<'a> {
    /// `L·R + s·η·(g + λ·L·R)`, the step with weight decay `λ` folded into the
    /// gradient, where `s` is the sign of `sign`.
    pub fn new(
        base: &'a LowRankWeight,
        grad: &'a Matrix,
        eta: f64,
        weight_decay: f64,
        sign: UpdateSign,
    ) -> Result<Self> {
        check_update(base, grad, eta)?;
        let s = sign.factor() * eta;
        Ok(Self {
            base,
            base_scale: 1.0 + s * weight_decay,
            grad,
            grad_scale: s,
        })
    }

    pub fn to_dense(&self) -> Matrix {
        self.base
            .reconstruct()
            .combine(self.base_scale, self.grad, self.grad_scale)
            .expect("shapes checked")
    }
}

impl EffectiveWeight for FactoredUpdate<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.base.out_features(), self.base.in_features())
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let low = self.base.left.matmul(&self.base.right.matmul(x).unwrap()).unwrap();
        let g = self.grad.matmul(x).unwrap();
        low.combine(self.base_scale, &g, self.grad_scale).unwrap()
    }

    fn apply_t(&self, x: &Matrix) -> Matrix {
        let low = self.base.right.tmatmul(&self.base.left.tmatmul(x).unwrap()).unwrap();
        let g = self.grad.tmatmul(x).unwrap();
        low.combine(self.base_scale, &g, self.grad_scale).unwrap()
    }
}

/// One warm-started subspace-iteration step on a dense effective weight.
pub fn wsi_step(w_eff: &Matrix, prev: &LowRankWeight, variant: WsiVariant) -> Result<LowRankWeight> {
    if !w_eff.is_finite() {
        return Err(Error::NonFinite("effective weight".into()));
    }
    wsi_step_with(w_eff, prev, variant)
}

/// [`wsi_step`] over any effective-weight operator.
pub fn wsi_step_with<W: EffectiveWeight + ?Sized>(
    w: &W,
    prev: &LowRankWeight,
    variant: WsiVariant,
) -> Result<LowRankWeight> {
    let (o, i) = w.shape();
    if (o, i) != (prev.out_features(), prev.in_features()) {
        return Err(Error::Shape(format!(
            "effective weight is {o}x{i}, factors describe {}x{}",
            prev.out_features(),
            prev.in_features()
        )));
    }
    // At t = 0 the left factor is U·Σ; its columns are orthogonal but scaled,
    // and projecting with it would scale R by Σ. Use its orthonormal basis.
    let basis = if prev.iteration == 0 {
        orthogonalize(&prev.left)
    } else {
        prev.left.clone()
    };
    let rt = w.apply_t(&basis);
    let left = orthogonalize(&w.apply(&rt));
    let right = match variant {
        WsiVariant::Verbatim => rt.transpose(),
        WsiVariant::Refresh => w.apply_t(&left).transpose(),
    };
    counters::record_intermediate((o * prev.rank) as u64);
    Ok(LowRankWeight {
        left,
        right,
        rank: prev.rank,
        epsilon: prev.epsilon,
        iteration: prev.iteration + 1,
    })
}

/// Baseline: re-run the ε-truncated SVD on the effective weight. The rank may
/// drift from step to step.
pub fn svd_step(w_eff: &Matrix, prev: &LowRankWeight) -> Result<LowRankWeight> {
    let mut next = wsi_init(w_eff, prev.epsilon)?;
    next.iteration = prev.iteration + 1;
    Ok(next)
}
