//! Forward and backward passes of a bias-free linear layer `y = a · Wᵀ`,
//! applied over the last mode of an activation tensor.
//!
//! The dense routines are the reference; the low-rank routines compute the
//! same quantities from `W ≈ L·R` and a Tucker-compressed input while only
//! materializing rank-sized intermediates.

use crate::activation::TuckerActivation;
use crate::counters;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::Tensor;
use crate::weight::LowRankWeight;

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("order >= 1") = last;
    s
}

fn rows_to_tensor(m: Matrix, leading: &[usize]) -> Result<Tensor> {
    let shape = with_last(leading, m.cols());
    Tensor::new(shape, m.into_data())
}

fn check_in(a: &Tensor, expected: usize, what: &str) -> Result<()> {
    if a.order() < 2 {
        return Err(Error::Shape(format!("{what} needs order >= 2, got {:?}", a.shape())));
    }
    if a.last_extent() != expected {
        return Err(Error::Shape(format!(
            "{what}: last extent {} does not match {expected}",
            a.last_extent()
        )));
    }
    Ok(())
}

/// `a · wᵀ` over the last mode.
pub fn forward_dense(a: &Tensor, w: &Matrix) -> Result<Tensor> {
    check_in(a, w.cols(), "forward")?;
    rows_to_tensor(a.to_row_matrix().matmul_t(w)?, a.shape())
}

/// `(a · Rᵀ) · Lᵀ`; only the `(Π leading) × K` intermediate is formed.
pub fn forward_lowrank(a: &Tensor, lr: &LowRankWeight) -> Result<Tensor> {
    check_in(a, lr.in_features(), "forward")?;
    let inner = a.to_row_matrix().matmul_t(lr.right())?;
    counters::record_intermediate(inner.len() as u64);
    rows_to_tensor(inner.matmul_t(lr.left())?, a.shape())
}

fn check_pair(a: &Tensor, dy: &Tensor) -> Result<()> {
    let (sa, sd) = (a.shape(), dy.shape());
    if sa.len() != sd.len() || sa.len() < 2 || sa[..sa.len() - 1] != sd[..sd.len() - 1] {
        return Err(Error::Shape(format!(
            "activation {sa:?} and output gradient {sd:?} disagree on leading extents"
        )));
    }
    Ok(())
}

/// `∂ℒ/∂W = Σ_{leading} dyᵀ · a`, shape `O × I`.
pub fn grad_weight_dense(a: &Tensor, dy: &Tensor) -> Result<Matrix> {
    check_pair(a, dy)?;
    dy.to_row_matrix().tmatmul(&a.to_row_matrix())
}

/// `∂ℒ/∂a = dy · w`.
pub fn grad_input_dense(dy: &Tensor, w: &Matrix) -> Result<Tensor> {
    check_in(dy, w.rows(), "input gradient")?;
    rows_to_tensor(dy.to_row_matrix().matmul(w)?, dy.shape())
}

/// `(dy · L) · R`, forming only the `(Π leading) × K` intermediate.
pub fn grad_input_lowrank(dy: &Tensor, lr: &LowRankWeight) -> Result<Tensor> {
    check_in(dy, lr.out_features(), "input gradient")?;
    let inner = dy.to_row_matrix().matmul(lr.left())?;
    counters::record_intermediate(inner.len() as u64);
    rows_to_tensor(inner.matmul(lr.right())?, dy.shape())
}

fn check_tucker(ta: &TuckerActivation, dy: &Tensor, order: usize) -> Result<()> {
    if ta.order() != order {
        return Err(Error::Shape(format!(
            "expected an order-{order} Tucker activation, got order {}",
            ta.order()
        )));
    }
    for (m, (f, r)) in ta.factors().iter().zip(ta.core().shape()).enumerate() {
        if f.cols() != *r {
            return Err(Error::Shape(format!(
                "factor {m} has {} columns but core extent is {r}",
                f.cols()
            )));
        }
    }
    let shape = ta.shape();
    let sd = dy.shape();
    if sd.len() != order || shape[..order - 1] != sd[..order - 1] {
        return Err(Error::Shape(format!(
            "Tucker activation {shape:?} and output gradient {sd:?} disagree on leading extents"
        )));
    }
    Ok(())
}

/// Weight gradient from an order-3 Tucker activation `B × N × I` and an
/// output gradient `B × N × O`, by staged contraction:
///
/// ```text
/// Z1[n,o,r1]  = Σ_b  dy[b,n,o] · U1[b,r1]
/// Z2[r1,r3,n] = Σ_r2 S[r1,r2,r3] · U2[n,r2]
/// Z3[r1,i,n]  = Σ_r3 Z2[r1,r3,n] · U3[i,r3]
/// ΔW[o,i]     = Σ_n Σ_r1 Z1[n,o,r1] · Z3[r1,i,n]
/// ```
pub fn grad_weight_lowrank_3d(ta: &TuckerActivation, dy: &Tensor) -> Result<Matrix> {
    check_tucker(ta, dy, 3)?;
    let [u1, u2, u3] = [&ta.factors()[0], &ta.factors()[1], &ta.factors()[2]];
    let (b, n, i) = (u1.rows(), u2.rows(), u3.rows());
    let (r1, r2, r3) = (u1.cols(), u2.cols(), u3.cols());
    let o = dy.last_extent();
    let s = ta.core().data();
    let g = dy.data();

    let mut z1 = vec![0.0; n * o * r1];
    for bb in 0..b {
        for nn in 0..n {
            let dy_row = &g[(bb * n + nn) * o..(bb * n + nn + 1) * o];
            for (oo, dv) in dy_row.iter().enumerate() {
                let dst = &mut z1[(nn * o + oo) * r1..(nn * o + oo + 1) * r1];
                for (z, u) in dst.iter_mut().zip(u1.row(bb)) {
                    *z += dv * u;
                }
            }
        }
    }
    counters::record_contraction((b * n * o * r1) as u64, (n * o * r1) as u64);

    let mut z2 = vec![0.0; r1 * r3 * n];
    for a in 0..r1 {
        for c in 0..r3 {
            for nn in 0..n {
                let mut acc = 0.0;
                for q in 0..r2 {
                    acc += s[(a * r2 + q) * r3 + c] * u2.get(nn, q);
                }
                z2[(a * r3 + c) * n + nn] = acc;
            }
        }
    }
    counters::record_contraction((r1 * r3 * n * r2) as u64, (r1 * r3 * n) as u64);

    let mut z3 = vec![0.0; r1 * i * n];
    for a in 0..r1 {
        for ii in 0..i {
            for nn in 0..n {
                let mut acc = 0.0;
                for c in 0..r3 {
                    acc += z2[(a * r3 + c) * n + nn] * u3.get(ii, c);
                }
                z3[(a * i + ii) * n + nn] = acc;
            }
        }
    }
    counters::record_contraction((r1 * i * n * r3) as u64, (r1 * i * n) as u64);
    counters::record_intermediate((n * o * r1).max(r1 * r3 * n).max(r1 * i * n) as u64);

    let mut dw = Matrix::zeros(o, i);
    for oo in 0..o {
        for ii in 0..i {
            let mut acc = 0.0;
            for nn in 0..n {
                let z1row = &z1[(nn * o + oo) * r1..(nn * o + oo + 1) * r1];
                for (a, zv) in z1row.iter().enumerate() {
                    acc += zv * z3[(a * i + ii) * n + nn];
                }
            }
            dw.set(oo, ii, acc);
        }
    }
    counters::record_contraction((o * i * n * r1) as u64, (o * i) as u64);
    Ok(dw)
}

/// Weight gradient from an order-4 Tucker activation `B × H × W × I` and an
/// output gradient `B × H × W × O`:
///
/// ```text
/// Z1[r1,h,w,o]   = Σ_b  U1[b,r1] · dy[b,h,w,o]
/// Z3[r1,h,r3,o]  = Σ_w  U3[w,r3] · Z1[r1,h,w,o]
/// Z2[r1,h,r3,r4] = Σ_r2 S[r1,r2,r3,r4] · U2[h,r2]
/// Z4[r1,h,r3,i]  = Σ_r4 Z2[r1,h,r3,r4] · U4[i,r4]
/// ΔW[o,i]        = Σ_{r1,h,r3} Z3[r1,h,r3,o] · Z4[r1,h,r3,i]
/// ```
pub fn grad_weight_lowrank_4d(ta: &TuckerActivation, dy: &Tensor) -> Result<Matrix> {
    check_tucker(ta, dy, 4)?;
    let f = ta.factors();
    let (u1, u2, u3, u4) = (&f[0], &f[1], &f[2], &f[3]);
    let (b, h, w, i) = (u1.rows(), u2.rows(), u3.rows(), u4.rows());
    let (r1, r2, r3, r4) = (u1.cols(), u2.cols(), u3.cols(), u4.cols());
    let o = dy.last_extent();
    let s = ta.core().data();
    let g = dy.data();

    // Z1 laid out [r1][h][w][o]
    let mut z1 = vec![0.0; r1 * h * w * o];
    let hwo = h * w * o;
    for bb in 0..b {
        let slab = &g[bb * hwo..(bb + 1) * hwo];
        for a in 0..r1 {
            let u = u1.get(bb, a);
            for (z, dv) in z1[a * hwo..(a + 1) * hwo].iter_mut().zip(slab) {
                *z += u * dv;
            }
        }
    }
    counters::record_contraction((r1 * h * w * o * b) as u64, (r1 * h * w * o) as u64);

    // Z3 laid out [r1][h][r3][o]
    let mut z3 = vec![0.0; r1 * h * r3 * o];
    for a in 0..r1 {
        for hh in 0..h {
            for c in 0..r3 {
                let dst = &mut z3[((a * h + hh) * r3 + c) * o..((a * h + hh) * r3 + c + 1) * o];
                for ww in 0..w {
                    let u = u3.get(ww, c);
                    let src = &z1[((a * h + hh) * w + ww) * o..((a * h + hh) * w + ww + 1) * o];
                    for (z, v) in dst.iter_mut().zip(src) {
                        *z += u * v;
                    }
                }
            }
        }
    }
    counters::record_contraction((r1 * h * r3 * o * w) as u64, (r1 * h * r3 * o) as u64);

    // Z2 laid out [r1][h][r3][r4]
    let mut z2 = vec![0.0; r1 * h * r3 * r4];
    for a in 0..r1 {
        for hh in 0..h {
            for c in 0..r3 {
                for d in 0..r4 {
                    let mut acc = 0.0;
                    for q in 0..r2 {
                        acc += s[((a * r2 + q) * r3 + c) * r4 + d] * u2.get(hh, q);
                    }
                    z2[((a * h + hh) * r3 + c) * r4 + d] = acc;
                }
            }
        }
    }
    counters::record_contraction((r1 * h * r3 * r4 * r2) as u64, (r1 * h * r3 * r4) as u64);

    // Z4 laid out [r1][h][r3][i]
    let mut z4 = vec![0.0; r1 * h * r3 * i];
    for t in 0..r1 * h * r3 {
        let src = &z2[t * r4..(t + 1) * r4];
        for ii in 0..i {
            z4[t * i + ii] = src.iter().zip(u4.row(ii)).map(|(x, y)| x * y).sum();
        }
    }
    counters::record_contraction((r1 * h * r3 * i * r4) as u64, (r1 * h * r3 * i) as u64);
    counters::record_intermediate(
        (r1 * h * w * o)
            .max(r1 * h * r3 * o)
            .max(r1 * h * r3 * r4)
            .max(r1 * h * r3 * i) as u64,
    );

    let mut dw = Matrix::zeros(o, i);
    let outer = r1 * h * r3;
    for oo in 0..o {
        for ii in 0..i {
            let mut acc = 0.0;
            for t in 0..outer {
                acc += z3[t * o + oo] * z4[t * i + ii];
            }
            dw.set(oo, ii, acc);
        }
    }
    counters::record_contraction((o * i * outer) as u64, (o * i) as u64);
    Ok(dw)
}

/// Dispatches on the Tucker order.
pub fn grad_weight_lowrank(ta: &TuckerActivation, dy: &Tensor) -> Result<Matrix> {
    match ta.order() {
        3 => grad_weight_lowrank_3d(ta, dy),
        4 => grad_weight_lowrank_4d(ta, dy),
        n => Err(Error::Shape(format!("no low-rank weight gradient for order {n}"))),
    }
}

/// What a low-rank layer keeps from its forward pass: the compressed input
/// and its weight factors.
#[derive(Clone, Copy, Debug)]
pub struct LayerTape<'a> {
    pub tucker: &'a TuckerActivation,
    pub weight: &'a LowRankWeight,
}

impl<'a> LayerTape<'a> {
    pub fn new(tucker: &'a TuckerActivation, weight: &'a LowRankWeight) -> Result<Self> {
        let shape = tucker.shape();
        if shape.last() != Some(&weight.in_features()) {
            return Err(Error::Shape(format!(
                "activation {shape:?} does not feed a layer with {} inputs",
                weight.in_features()
            )));
        }
        Ok(Self { tucker, weight })
    }

    /// Shape of the layer input the tape stands in for.
    pub fn shape_in(&self) -> Vec<usize> {
        self.tucker.shape()
    }

    /// `(∂ℒ/∂a, ∂ℒ/∂W)`.
    pub fn backward(&self, dy: &Tensor) -> Result<(Tensor, Matrix)> {
        let dx = grad_input_lowrank(dy, self.weight)?;
        let dw = grad_weight_lowrank(self.tucker, dy)?;
        Ok((dx, dw))
    }
}
