//! Dense tensors of order 1 to 4, mode unfoldings and mode products.
//!
//! Modes are zero-based. The mode-`m` unfolding of a tensor with extents
//! `D_0 × … × D_{n-1}` is the `D_m × Π_{k≠m} D_k` matrix whose row `j` holds
//! every entry with mode-`m` index `j`; the remaining modes are flattened in
//! ascending mode order, row-major (last index fastest).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_ORDER {
        return Err(Error::Shape(format!(
            "tensor order must be in 1..={MAX_ORDER}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("tensor extents must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Fills a tensor by multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(t)
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        for v in &mut t.data {
            *v = rng.sample(StandardNormal);
        }
        Ok(t)
    }

    /// Views a matrix as an order-2 tensor.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn last_extent(&self) -> usize {
        *self.shape.last().expect("order >= 1")
    }

    /// Product of every extent but the last.
    pub fn leading_len(&self) -> usize {
        self.data.len() / self.last_extent()
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (i, d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f64) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Flattens all leading modes: `(Π leading) × last`.
    pub fn to_row_matrix(&self) -> Matrix {
        Matrix::new(self.leading_len(), self.last_extent(), self.data.clone()).expect("consistent")
    }

    fn split(&self, mode: usize) -> (usize, usize, usize) {
        let pre: usize = self.shape[..mode].iter().product();
        let post: usize = self.shape[mode + 1..].iter().product();
        (pre, self.shape[mode], post)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }

    /// `(D_mode, Π_{k≠mode} D_k)`, the unfolding shape `(a_m, b_m)`.
    pub fn unfolding_shape(&self, mode: usize) -> Result<(usize, usize)> {
        self.check_mode(mode)?;
        let d = self.shape[mode];
        Ok((d, self.len() / d))
    }

    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        self.check_mode(mode)?;
        let (pre, d, post) = self.split(mode);
        let cols = pre * post;
        let mut out = vec![0.0; d * cols];
        for p in 0..pre {
            for j in 0..d {
                let src = &self.data[(p * d + j) * post..(p * d + j + 1) * post];
                out[j * cols + p * post..j * cols + (p + 1) * post].copy_from_slice(src);
            }
        }
        Matrix::new(d, cols, out)
    }

    /// Inverse of [`Tensor::unfold`].
    pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::zeros(shape)?;
        t.check_mode(mode)?;
        let (pre, d, post) = t.split(mode);
        if m.rows() != d || m.cols() != pre * post {
            return Err(Error::Shape(format!(
                "{}x{} matrix cannot fold along mode {mode} into {shape:?}",
                m.rows(),
                m.cols()
            )));
        }
        let cols = pre * post;
        let src = m.data();
        for p in 0..pre {
            for j in 0..d {
                t.data[(p * d + j) * post..(p * d + j + 1) * post]
                    .copy_from_slice(&src[j * cols + p * post..j * cols + (p + 1) * post]);
            }
        }
        Ok(t)
    }

    /// The mode product `t ×_mode m` for `m` of shape `Q × D_mode`:
    /// the mode extent becomes `Q` and
    /// `out[…, q, …] = Σ_p t[…, p, …] · m[q, p]`.
    pub fn mode_product(&self, m: &Matrix, mode: usize) -> Result<Tensor> {
        self.check_mode(mode)?;
        let (pre, d, post) = self.split(mode);
        if m.cols() != d {
            return Err(Error::Shape(format!(
                "mode-{mode} product needs {d} matrix columns, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let q = m.rows();
        let mut shape = self.shape.clone();
        shape[mode] = q;
        let mut out = vec![0.0; pre * q * post];
        for p in 0..pre {
            let block = &self.data[p * d * post..(p + 1) * d * post];
            let dst = &mut out[p * q * post..(p + 1) * q * post];
            for r in 0..q {
                let row = &mut dst[r * post..(r + 1) * post];
                let w0 = m.get(r, 0);
                for (o, v) in row.iter_mut().zip(&block[..post]) {
                    *o = w0 * v;
                }
                for j in 1..d {
                    let w = m.get(r, j);
                    for (o, v) in row.iter_mut().zip(&block[j * post..(j + 1) * post]) {
                        *o += w * v;
                    }
                }
            }
        }
        counters::record_contraction((pre * q * post * d) as u64, (pre * q * post) as u64);
        Tensor::new(shape, out)
    }

    /// `t ×_mode mᵀ` for `m` of shape `D_mode × Q`, without forming the
    /// transpose. This is the projection onto a factor basis.
    pub fn mode_product_t(&self, m: &Matrix, mode: usize) -> Result<Tensor> {
        self.check_mode(mode)?;
        if m.rows() != self.shape[mode] {
            return Err(Error::Shape(format!(
                "mode-{mode} projection needs {} matrix rows, got {}x{}",
                self.shape[mode],
                m.rows(),
                m.cols()
            )));
        }
        self.mode_product(&m.transpose(), mode)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − other‖_F / ‖other‖_F` (absolute when `other` is zero).
    pub fn relative_distance(&self, other: &Tensor) -> f64 {
        let d = self.distance(other);
        let n = other.frobenius_norm();
        if n == 0.0 {
            d
        } else {
            d / n
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
