//! Activation subspace iteration: warm-started Tucker approximations of
//! order-3 and order-4 activation tensors.
//!
//! For each mode `m` the activation is unfolded to `A_m (a_m × b_m)`, a
//! sketch `V` is formed (Gaussian on a cold start, `A_mᵀ U_prev` on a warm
//! start) and the factor becomes `U = orthogonalize(A_m V)`. The core is the
//! activation projected onto every factor, `S = A ×_1 U_1ᵀ ⋯ ×_n U_nᵀ`, and
//! the approximation is `S ×_1 U_1 ⋯ ×_n U_n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::linalg::{explained_variance_rank, orthogonalize, svd};
use crate::matrix::Matrix;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuckerActivation {
    core: Tensor,
    factors: Vec<Matrix>,
    ranks: Vec<usize>,
    /// Number of warm-started refreshes since the last cold start.
    epoch: u64,
}

/// How [`hosvd`] picks its per-mode ranks.
#[derive(Clone, Debug, PartialEq)]
pub enum TuckerSpec {
    Ranks(Vec<usize>),
    /// One explained-variance threshold applied to every mode.
    Threshold(f64),
}

impl TuckerActivation {
    /// Assembles a Tucker form from parts, validating ranks against the
    /// factor shapes.
    pub fn from_parts(core: Tensor, factors: Vec<Matrix>, epoch: u64) -> Result<Self> {
        if factors.len() != core.order() {
            return Err(Error::Shape(format!(
                "{} factors for a core of order {}",
                factors.len(),
                core.order()
            )));
        }
        for (m, (f, r)) in factors.iter().zip(core.shape()).enumerate() {
            if f.cols() != *r {
                return Err(Error::Shape(format!(
                    "factor {m} has {} columns, core extent is {r}",
                    f.cols()
                )));
            }
        }
        let ranks = core.shape().to_vec();
        Ok(Self {
            core,
            factors,
            ranks,
            epoch,
        })
    }

    pub fn core(&self) -> &Tensor {
        &self.core
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    /// Extents of the approximated tensor.
    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    /// `Π r_m + Σ D_m r_m`.
    pub fn stored_elements(&self) -> usize {
        self.core.len() + self.factors.iter().map(Matrix::len).sum::<usize>()
    }

    pub fn reconstruct(&self) -> Tensor {
        let mut t = self.core.clone();
        for (m, f) in self.factors.iter().enumerate() {
            t = t.mode_product(f, m).expect("factor shapes validated");
        }
        t
    }
}

/// Free-function form of [`TuckerActivation::reconstruct`].
pub fn reconstruct_tucker(ta: &TuckerActivation) -> Tensor {
    ta.reconstruct()
}

/// Largest admissible rank per mode, `min(a_m, b_m)`.
pub fn rank_bounds(shape: &[usize]) -> Vec<usize> {
    let total: usize = shape.iter().product();
    shape.iter().map(|&d| d.min(total / d)).collect()
}

fn check_order(a: &Tensor) -> Result<()> {
    if !(3..=4).contains(&a.order()) {
        return Err(Error::Shape(format!(
            "activation subspace iteration needs an order-3 or order-4 tensor, got order {}",
            a.order()
        )));
    }
    Ok(())
}

pub fn check_ranks(shape: &[usize], ranks: &[usize]) -> Result<()> {
    if ranks.len() != shape.len() {
        return Err(Error::Shape(format!(
            "{} ranks for a tensor of order {}",
            ranks.len(),
            shape.len()
        )));
    }
    for (mode, (&rank, max)) in ranks.iter().zip(rank_bounds(shape)).enumerate() {
        if rank == 0 || rank > max {
            return Err(Error::RankOutOfBounds { mode, rank, max });
        }
    }
    Ok(())
}

/// Projects `a` onto the factor bases, `a ×_m U_mᵀ` over every mode.
///
/// Mode products on distinct modes commute, so they are applied in order of
/// increasing `r_m / D_m`; shrinking the tensor fastest first keeps the later
/// products cheap.
pub fn project_core(a: &Tensor, factors: &[Matrix]) -> Result<Tensor> {
    let mut order: Vec<usize> = (0..factors.len()).collect();
    order.sort_by(|&x, &y| {
        let rx = factors[x].cols() as f64 / factors[x].rows() as f64;
        let ry = factors[y].cols() as f64 / factors[y].rows() as f64;
        rx.total_cmp(&ry)
    });
    let mut core = a.clone();
    for m in order {
        core = core.mode_product_t(&factors[m], m)?;
    }
    Ok(core)
}

/// One activation-subspace-iteration pass over every mode.
///
/// With `prev = None` each mode starts from an i.i.d. standard normal sketch
/// drawn from `rng`; otherwise the previous factors seed the sketch and `rng`
/// is untouched.
pub fn asi_step<R: Rng + ?Sized>(
    a: &Tensor,
    ranks: &[usize],
    prev: Option<&TuckerActivation>,
    rng: &mut R,
) -> Result<TuckerActivation> {
    check_order(a)?;
    check_ranks(a.shape(), ranks)?;
    if let Some(p) = prev {
        if p.shape() != a.shape() || p.ranks() != ranks {
            return Err(Error::Shape(format!(
                "warm start from shape {:?} ranks {:?} does not match shape {:?} ranks {ranks:?}",
                p.shape(),
                p.ranks(),
                a.shape()
            )));
        }
    }
    let mut factors = Vec::with_capacity(a.order());
    for (m, &r) in ranks.iter().enumerate() {
        let unfolded = a.unfold(m)?;
        let sketch = match prev {
            None => Matrix::random_normal(unfolded.cols(), r, rng),
            Some(p) => unfolded.tmatmul(&p.factors[m])?,
        };
        factors.push(orthogonalize(&unfolded.matmul(&sketch)?));
    }
    let core = project_core(a, &factors)?;
    let epoch = prev.map_or(0, |p| p.epoch + 1);
    TuckerActivation::from_parts(core, factors, epoch)
}

/// Truncated higher-order SVD: per-mode truncated SVD of each unfolding.
pub fn hosvd(a: &Tensor, spec: &TuckerSpec) -> Result<TuckerActivation> {
    if a.data().iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroInput);
    }
    if let TuckerSpec::Ranks(r) = spec {
        check_ranks(a.shape(), r)?;
    }
    if let TuckerSpec::Threshold(eps) = spec {
        if !(0.0..=1.0).contains(eps) {
            return Err(Error::InvalidArgument(format!(
                "explained-variance threshold must lie in [0, 1], got {eps}"
            )));
        }
    }
    let bounds = rank_bounds(a.shape());
    let mut factors = Vec::with_capacity(a.order());
    for m in 0..a.order() {
        let unfolded = a.unfold(m)?;
        let s = svd(&unfolded)?;
        let r = match spec {
            TuckerSpec::Ranks(r) => r[m],
            TuckerSpec::Threshold(eps) => explained_variance_rank(&s.singular_values, *eps).min(bounds[m]),
        };
        factors.push(s.u.leading_columns(r));
    }
    let core = project_core(a, &factors)?;
    counters::record_intermediate(core.len() as u64);
    TuckerActivation::from_parts(core, factors, 0)
}
