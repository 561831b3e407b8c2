//! Toy classifiers whose designated linear layers run through the low-rank
//! engine. Everything else (GELU, attention, pooling, head) is dense.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{AsiRefresh, Mode};
use crate::activation::{asi_step, project_core, TuckerActivation};
use crate::autodiff::{
    forward_dense, forward_lowrank, grad_input_dense, grad_input_lowrank, grad_weight_dense, grad_weight_lowrank,
};
use crate::counters::{self, OpCounts};
use crate::error::{Error, Result};
use crate::linalg::{orthogonalize, svd};
use crate::matrix::Matrix;
use crate::rank_select::{ActivationProbe, LayerProbe};
use crate::tensor::Tensor;
use crate::weight::{svd_step, wsi_init, wsi_step_with, FactoredUpdate, LowRankWeight, UpdateSign, WsiVariant};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// GELU-separated compressed layers on `B × N × C` tokens.
    #[default]
    Mlp,
    /// Dense single-head self-attention with a residual, then a residual
    /// two-layer compressed MLP.
    Block,
    /// The MLP on tokens viewed as a `B × H × W × C` grid.
    Windowed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// i.i.d. `N(0, 1/I)`.
    Gaussian,
    /// Random orthonormal singular vectors with singular values `decay^j`,
    /// scaled to the Gaussian init's expected Frobenius norm. Stands in for
    /// the decaying spectra of pretrained weights.
    Spectral { decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Widths of the compressed layers. `Block` takes exactly one, the MLP
    /// hidden width.
    pub hidden: Vec<usize>,
    pub init: Init,
    /// `[H, W]` for `Windowed`; by default the most square factorization of
    /// the token count.
    pub window: Option<[usize; 2]>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { kind: ModelKind::Mlp, hidden: vec![64, 64], init: Init::Gaussian, window: None }
    }
}

/// Per-step switches for the forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StepCtx {
    /// Cache what the backward pass needs.
    pub train: bool,
    /// Cache dense activations regardless of mode (held-out probing).
    pub exact: bool,
    /// Recompute ASI factors this step (always true per-iteration).
    pub refresh_factors: bool,
}

impl StepCtx {
    pub const EVAL: StepCtx = StepCtx { train: false, exact: false, refresh_factors: false };
    pub const TRAIN: StepCtx = StepCtx { train: true, exact: false, refresh_factors: true };
    pub const PROBE: StepCtx = StepCtx { train: true, exact: true, refresh_factors: false };
}

/// Update hyperparameters for one step.
#[derive(Clone, Copy, Debug)]
pub struct UpdateCtx {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sign: UpdateSign,
    pub variant: WsiVariant,
    /// Multiplier from global gradient clipping.
    pub grad_scale: f64,
}

#[derive(Clone, Debug)]
enum WeightRepr {
    Dense(Matrix),
    LowRank(LowRankWeight),
    /// Dense master plus its ε-truncated SVD, recomputed after every update.
    Master { master: Matrix, current: LowRankWeight },
}

/// A bias-free linear layer with selectable weight and activation storage.
#[derive(Clone, Debug)]
pub struct WasiLinear {
    weight: WeightRepr,
    ranks: Option<Vec<usize>>,
    tucker: Option<TuckerActivation>,
    input: Option<Tensor>,
    grad: Option<Matrix>,
    velocity: Option<Matrix>,
    output_grad: Option<Tensor>,
    rng: ChaCha8Rng,
}

/// Stored elements of one compressed layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub in_features: usize,
    pub out_features: usize,
    /// Weight rank `K`, or `min(I, O)` for a dense weight.
    pub weight_rank: usize,
    pub weight_elements: u64,
    /// Extents of the last cached input.
    pub activation_dims: Vec<usize>,
    pub activation_ranks: Option<Vec<usize>>,
    pub activation_elements: u64,
}

impl WasiLinear {
    fn new(w: Matrix, mode: Mode, epsilon: f64, seed: u64) -> Result<Self> {
        let weight = match mode {
            Mode::Vanilla | Mode::AsiOnly => WeightRepr::Dense(w),
            Mode::Wasi | Mode::WsiOnly => WeightRepr::LowRank(wsi_init(&w, epsilon)?),
            Mode::SvdEveryStep => {
                let current = wsi_init(&w, epsilon)?;
                WeightRepr::Master { master: w, current }
            }
        };
        Ok(WasiLinear {
            weight,
            ranks: None,
            tucker: None,
            input: None,
            grad: None,
            velocity: None,
            output_grad: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn in_features(&self) -> usize {
        match &self.weight {
            WeightRepr::Dense(w) | WeightRepr::Master { master: w, .. } => w.cols(),
            WeightRepr::LowRank(lr) => lr.in_features(),
        }
    }

    pub fn out_features(&self) -> usize {
        match &self.weight {
            WeightRepr::Dense(w) | WeightRepr::Master { master: w, .. } => w.rows(),
            WeightRepr::LowRank(lr) => lr.out_features(),
        }
    }

    /// Weight rank `K` in use, `None` for a dense weight.
    pub fn rank(&self) -> Option<usize> {
        match &self.weight {
            WeightRepr::Dense(_) => None,
            WeightRepr::LowRank(lr) | WeightRepr::Master { current: lr, .. } => Some(lr.rank()),
        }
    }

    pub fn low_rank(&self) -> Option<&LowRankWeight> {
        match &self.weight {
            WeightRepr::Dense(_) => None,
            WeightRepr::LowRank(lr) | WeightRepr::Master { current: lr, .. } => Some(lr),
        }
    }

    pub fn dense(&self) -> Option<&Matrix> {
        match &self.weight {
            WeightRepr::Dense(w) | WeightRepr::Master { master: w, .. } => Some(w),
            WeightRepr::LowRank(_) => None,
        }
    }

    /// The weight the forward pass applies, `W` or `L·R`.
    pub fn effective_weight(&self) -> Matrix {
        match &self.weight {
            WeightRepr::Dense(w) => w.clone(),
            WeightRepr::LowRank(lr) | WeightRepr::Master { current: lr, .. } => lr.reconstruct(),
        }
    }

    /// Replaces the effective weight, keeping the representation: a
    /// low-rank layer takes the lossless factorization of `w`.
    pub fn set_effective_weight(&mut self, w: &Matrix) -> Result<()> {
        if w.shape() != (self.out_features(), self.in_features()) {
            return Err(Error::Shape("replacement weight has the wrong shape".into()));
        }
        match &mut self.weight {
            WeightRepr::Dense(d) => *d = w.clone(),
            WeightRepr::LowRank(lr) => *lr = full_factors(w)?,
            WeightRepr::Master { master, current } => {
                *master = w.clone();
                *current = full_factors(w)?;
            }
        }
        Ok(())
    }

    pub fn activation_ranks(&self) -> Option<&[usize]> {
        self.ranks.as_deref()
    }

    /// Sets ASI ranks; `None` caches inputs densely. Drops warm-start state.
    pub fn set_activation_ranks(&mut self, ranks: Option<Vec<usize>>) {
        self.ranks = ranks;
        self.tucker = None;
    }

    pub fn tucker(&self) -> Option<&TuckerActivation> {
        self.tucker.as_ref()
    }

    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match &self.weight {
            WeightRepr::Dense(w) => forward_dense(x, w),
            WeightRepr::LowRank(lr) | WeightRepr::Master { current: lr, .. } => forward_lowrank(x, lr),
        }
    }

    fn compress(&mut self, x: &Tensor, ranks: &[usize], refresh: bool) -> Result<TuckerActivation> {
        let prev = self.tucker.take().filter(|t| t.shape() == x.shape() && t.ranks() == ranks);
        match prev {
            Some(p) if !refresh => {
                let core = project_core(x, p.factors())?;
                TuckerActivation::from_parts(core, p.factors().to_vec(), p.epoch())
            }
            prev => asi_step(x, ranks, prev.as_ref(), &mut self.rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: StepCtx) -> Result<Tensor> {
        let y = self.apply(x)?;
        if ctx.train {
            match self.ranks.clone() {
                Some(r) if !ctx.exact => {
                    self.tucker = Some(self.compress(x, &r, ctx.refresh_factors)?);
                    self.input = None;
                }
                _ => self.input = Some(x.clone()),
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor, keep_output_grad: bool) -> Result<Tensor> {
        let dx = match &self.weight {
            WeightRepr::Dense(w) => grad_input_dense(dy, w)?,
            WeightRepr::LowRank(lr) | WeightRepr::Master { current: lr, .. } => grad_input_lowrank(dy, lr)?,
        };
        let g = match (&self.input, &self.tucker) {
            (Some(a), _) => grad_weight_dense(a, dy)?,
            (None, Some(t)) => grad_weight_lowrank(t, dy)?,
            (None, None) => return Err(Error::InvalidArgument("backward before a training forward".into())),
        };
        self.grad = Some(g);
        if keep_output_grad {
            self.output_grad = Some(dy.clone());
        }
        Ok(dx)
    }

    fn update(&mut self, u: &UpdateCtx) -> Result<()> {
        let g = self.grad.take().ok_or_else(|| Error::InvalidArgument("update without a gradient".into()))?;
        let g = if u.grad_scale != 1.0 { g.scale(u.grad_scale) } else { g };
        let dir = match self.velocity.take() {
            Some(v) if u.momentum > 0.0 => v.combine(u.momentum, &g, 1.0)?,
            _ => g,
        };
        if !dir.is_finite() {
            return Err(Error::NonFinite("weight gradient".into()));
        }
        let s = u.sign.factor() * u.lr;
        match &mut self.weight {
            WeightRepr::Dense(w) => *w = w.combine(1.0 + s * u.weight_decay, &dir, s)?,
            WeightRepr::LowRank(lr) => {
                let eff = FactoredUpdate::new(lr, &dir, u.lr, u.weight_decay, u.sign)?;
                *lr = wsi_step_with(&eff, lr, u.variant)?;
            }
            WeightRepr::Master { master, current } => {
                *master = master.combine(1.0 + s * u.weight_decay, &dir, s)?;
                *current = svd_step(master, current)?;
            }
        }
        if u.momentum > 0.0 {
            self.velocity = Some(dir);
        }
        Ok(())
    }

    pub fn memory(&self) -> LayerMemory {
        let (i, o) = (self.in_features(), self.out_features());
        let (k, weight_elements) = match &self.weight {
            WeightRepr::Dense(_) => (i.min(o), (i * o) as u64),
            WeightRepr::LowRank(lr) => (lr.rank(), lr.stored_elements() as u64),
            WeightRepr::Master { current, .. } => (current.rank(), (i * o + current.stored_elements()) as u64),
        };
        let (dims, elements) = match (&self.input, &self.tucker) {
            (Some(a), _) => (a.shape().to_vec(), a.len() as u64),
            (None, Some(t)) => (t.shape(), t.stored_elements() as u64),
            _ => (vec![], 0),
        };
        LayerMemory {
            in_features: i,
            out_features: o,
            weight_rank: k,
            weight_elements,
            activation_dims: dims,
            activation_ranks: if self.input.is_some() { None } else { self.ranks.clone() },
            activation_elements: elements,
        }
    }

    /// Factor blobs for checkpoints: `(name, rows, cols, data)`.
    pub fn blobs(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mat = |name: &str, m: &Matrix| (name.to_string(), vec![m.rows(), m.cols()], m.data().to_vec());
        let mut out = match &self.weight {
            WeightRepr::Dense(w) => vec![mat("W", w)],
            WeightRepr::LowRank(lr) => vec![mat("L", lr.left()), mat("R", lr.right())],
            WeightRepr::Master { master, current } => {
                vec![mat("W", master), mat("L", current.left()), mat("R", current.right())]
            }
        };
        if let Some(t) = &self.tucker {
            out.push(("core".into(), t.core().shape().to_vec(), t.core().data().to_vec()));
            for (m, u) in t.factors().iter().enumerate() {
                out.push(mat(&format!("U{}", m + 1), u));
            }
        }
        out
    }
}

/// Dense linear layer over the last mode, optional bias.
#[derive(Clone, Debug)]
pub struct DenseLinear {
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
    input: Option<Tensor>,
    gw: Option<Matrix>,
    gb: Option<Vec<f64>>,
    vw: Option<Matrix>,
    vb: Option<Vec<f64>>,
}

impl DenseLinear {
    fn new(w: Matrix, bias: bool) -> Self {
        let b = bias.then(|| vec![0.0; w.rows()]);
        DenseLinear { w, b, input: None, gw: None, gb: None, vw: None, vb: None }
    }

    fn forward(&mut self, x: &Tensor, ctx: StepCtx) -> Result<Tensor> {
        let mut y = forward_dense(x, &self.w)?;
        if let Some(b) = &self.b {
            let o = b.len();
            for row in y.data_mut().chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
            counters::record(0, (x.leading_len() * o) as u64);
        }
        if ctx.train {
            self.input = Some(x.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.input.as_ref().ok_or_else(|| Error::InvalidArgument("backward before forward".into()))?;
        self.gw = Some(grad_weight_dense(x, dy)?);
        if self.b.is_some() {
            let o = dy.last_extent();
            let mut gb = vec![0.0; o];
            for row in dy.data().chunks(o) {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            counters::record(0, (dy.len() - o) as u64);
            self.gb = Some(gb);
        }
        grad_input_dense(dy, &self.w)
    }

    fn grad_norm_sq(&self) -> f64 {
        let w = self.gw.as_ref().map_or(0.0, |g| g.frobenius_norm_sq());
        let b = self.gb.as_ref().map_or(0.0, |g| g.iter().map(|v| v * v).sum());
        w + b
    }

    fn update(&mut self, u: &UpdateCtx) -> Result<()> {
        let s = u.sign.factor() * u.lr;
        if let Some(g) = self.gw.take() {
            let g = g.scale(u.grad_scale);
            let dir = match self.vw.take() {
                Some(v) if u.momentum > 0.0 => v.combine(u.momentum, &g, 1.0)?,
                _ => g,
            };
            self.w = self.w.combine(1.0 + s * u.weight_decay, &dir, s)?;
            if u.momentum > 0.0 {
                self.vw = Some(dir);
            }
        }
        if let (Some(g), Some(b)) = (self.gb.take(), self.b.as_mut()) {
            let dir: Vec<f64> = match self.vb.take() {
                Some(v) if u.momentum > 0.0 => {
                    v.iter().zip(&g).map(|(v, g)| u.momentum * v + u.grad_scale * g).collect()
                }
                _ => g.iter().map(|g| u.grad_scale * g).collect(),
            };
            for (bb, d) in b.iter_mut().zip(&dir) {
                *bb += s * d;
            }
            if u.momentum > 0.0 {
                self.vb = Some(dir);
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn gelu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let data = pre.data().iter().zip(dy.data()).map(|(&x, &g)| gelu_grad(x) * g).collect();
    Tensor::new(pre.shape().to_vec(), data).expect("same shape")
}

/// Mean over every mode except the first and last: `B × .. × C → B × C`.
fn mean_pool(x: &Tensor) -> Tensor {
    let (b, c) = (x.shape()[0], x.last_extent());
    let t = x.len() / (b * c);
    let mut out = vec![0.0; b * c];
    for (bi, chunk) in x.data().chunks(t * c).enumerate() {
        for row in chunk.chunks(c) {
            for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= t as f64);
    Tensor::new(vec![b, c], out).expect("pooled shape")
}

fn mean_pool_backward(dy: &Tensor, shape: &[usize]) -> Tensor {
    let (b, c) = (shape[0], *shape.last().unwrap());
    let t: usize = shape[1..shape.len() - 1].iter().product();
    let mut data = Vec::with_capacity(b * t * c);
    for bi in 0..b {
        let row: Vec<f64> = dy.data()[bi * c..(bi + 1) * c].iter().map(|v| v / t as f64).collect();
        for _ in 0..t {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("pool shape")
}

/// Single-head softmax self-attention on `B × N × C`, dense throughout.
#[derive(Clone, Debug)]
struct Attention {
    q: DenseLinear,
    k: DenseLinear,
    v: DenseLinear,
    o: DenseLinear,
    cache: Option<AttnCache>,
}

#[derive(Clone, Debug)]
struct AttnCache {
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    p: Vec<Matrix>,
}

fn batch_slices(t: &Tensor) -> Vec<Matrix> {
    let (b, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..b).map(|i| Matrix::new(n, c, t.data()[i * n * c..(i + 1) * n * c].to_vec()).unwrap()).collect()
}

fn stack(ms: &[Matrix]) -> Tensor {
    let (n, c) = ms[0].shape();
    let data = ms.iter().flat_map(|m| m.data().iter().copied()).collect();
    Tensor::new(vec![ms.len(), n, c], data).unwrap()
}

fn softmax_rows(s: &Matrix) -> Matrix {
    let mut p = s.clone();
    let c = p.cols();
    for row in p.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

impl Attention {
    fn forward(&mut self, x: &Tensor, ctx: StepCtx) -> Result<Tensor> {
        let c = x.last_extent();
        let scale = 1.0 / (c as f64).sqrt();
        let (q, k, v) = (self.q.forward(x, ctx)?, self.k.forward(x, ctx)?, self.v.forward(x, ctx)?);
        let (qs, ks, vs) = (batch_slices(&q), batch_slices(&k), batch_slices(&v));
        let mut ps = Vec::with_capacity(qs.len());
        let mut hs = Vec::with_capacity(qs.len());
        for ((qb, kb), vb) in qs.iter().zip(&ks).zip(&vs) {
            let p = softmax_rows(&qb.matmul_t(kb)?.scale(scale));
            hs.push(p.matmul(vb)?);
            ps.push(p);
        }
        let out = self.o.forward(&stack(&hs), ctx)?;
        if ctx.train {
            self.cache = Some(AttnCache { q: qs, k: ks, v: vs, p: ps });
        }
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let c = dy.last_extent();
        let scale = 1.0 / (c as f64).sqrt();
        let cache = self.cache.take().ok_or_else(|| Error::InvalidArgument("attention backward before forward".into()))?;
        let dh = batch_slices(&self.o.backward(dy)?);
        let (mut dq, mut dk, mut dv) = (vec![], vec![], vec![]);
        for b in 0..dh.len() {
            let p = &cache.p[b];
            let dp = dh[b].matmul_t(&cache.v[b])?;
            dv.push(p.tmatmul(&dh[b])?);
            let mut ds = dp.clone();
            let n = p.cols();
            for (i, row) in ds.data_mut().chunks_mut(n).enumerate() {
                let prow = p.row(i);
                let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, pv) in row.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            dq.push(ds.matmul(&cache.k[b])?);
            dk.push(ds.tmatmul(&cache.q[b])?);
        }
        let dx = self.q.backward(&stack(&dq))?;
        let dx = dx.add(&self.k.backward(&stack(&dk))?)?;
        dx.add(&self.v.backward(&stack(&dv))?)
    }

    fn parts_mut(&mut self) -> [&mut DenseLinear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    fn parts(&self) -> [&DenseLinear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

/// Per-layer stored elements plus the global operation counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub layers: Vec<LayerMemory>,
    pub ops: OpCounts,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    mode: Mode,
    sample_shape: Vec<usize>,
    layer_shape: Vec<usize>,
    classes: usize,
    attention: Option<Attention>,
    layers: Vec<WasiLinear>,
    head: DenseLinear,
    pre_act: Vec<Tensor>,
    pooled_shape: Vec<usize>,
    keep_output_grads: bool,
}

fn init_weight(o: usize, i: usize, init: &Init, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let sd = 1.0 / (i as f64).sqrt();
    match init {
        Init::Gaussian => {
            let n = Normal::new(0.0, sd).expect("positive sd");
            Ok(Matrix::from_fn(o, i, |_, _| n.sample(rng)))
        }
        Init::Spectral { decay } => {
            if !(*decay > 0.0 && *decay <= 1.0) {
                return Err(Error::InvalidArgument(format!("spectral decay must lie in (0, 1], got {decay}")));
            }
            let k = o.min(i);
            let u = orthogonalize(&Matrix::random_normal(o, k, rng));
            let v = orthogonalize(&Matrix::random_normal(i, k, rng));
            let raw: Vec<f64> = (0..k).map(|j| decay.powi(j as i32)).collect();
            // E‖W‖² = O·I·sd² = O for the Gaussian init.
            let norm = (raw.iter().map(|s| s * s).sum::<f64>() / o as f64).sqrt();
            let mut us = u.clone();
            for r in 0..o {
                for (j, s) in raw.iter().enumerate() {
                    us.set(r, j, u.get(r, j) * s / norm);
                }
            }
            us.matmul_t(&v)
        }
    }
}

fn window_of(n: usize) -> [usize; 2] {
    let mut h = (n as f64).sqrt().floor() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    [h, n / h]
}

/// Builds a seeded model for samples of `sample_shape` (`N × C` or
/// `H × W × C`) and `classes` outputs.
pub fn build_model(spec: &ModelSpec, mode: Mode, epsilon: f64, sample_shape: &[usize], classes: usize, seed: u64) -> Result<Model> {
    if !(2..=3).contains(&sample_shape.len()) || sample_shape.contains(&0) {
        return Err(Error::Shape(format!("samples must be N×C or H×W×C, got {sample_shape:?}")));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if spec.hidden.is_empty() || spec.hidden.contains(&0) {
        return Err(Error::InvalidArgument("hidden widths must be non-empty and positive".into()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let c = *sample_shape.last().unwrap();
    let n: usize = sample_shape[..sample_shape.len() - 1].iter().product();
    let layer_shape = match spec.kind {
        ModelKind::Mlp | ModelKind::Block => vec![n, c],
        ModelKind::Windowed => {
            let [h, w] = match (spec.window, sample_shape.len()) {
                (Some(win), _) => win,
                (None, 3) => [sample_shape[0], sample_shape[1]],
                (None, _) => window_of(n),
            };
            if h * w != n {
                return Err(Error::Shape(format!("window {h}×{w} does not tile {n} tokens")));
            }
            vec![h, w, c]
        }
    };
    if spec.kind == ModelKind::Block && spec.hidden.len() != 1 {
        return Err(Error::InvalidArgument("a block takes exactly one hidden width".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths: Vec<(usize, usize)> = match spec.kind {
        ModelKind::Block => vec![(c, spec.hidden[0]), (spec.hidden[0], c)],
        _ => {
            let mut prev = c;
            spec.hidden
                .iter()
                .map(|&h| {
                    let io = (prev, h);
                    prev = h;
                    io
                })
                .collect()
        }
    };
    let mut layers = Vec::with_capacity(widths.len());
    for (idx, &(i, o)) in widths.iter().enumerate() {
        let w = init_weight(o, i, &spec.init, &mut rng)?;
        layers.push(WasiLinear::new(w, mode, epsilon, seed ^ (0xa51_0000 + idx as u64))?);
    }
    let attention = if spec.kind == ModelKind::Block {
        let mut part = || -> Result<DenseLinear> { Ok(DenseLinear::new(init_weight(c, c, &Init::Gaussian, &mut rng)?, false)) };
        Some(Attention { q: part()?, k: part()?, v: part()?, o: part()?, cache: None })
    } else {
        None
    };
    let features = widths.last().unwrap().1;
    let head = DenseLinear::new(init_weight(classes, features, &Init::Gaussian, &mut rng)?, true);
    Ok(Model {
        spec: spec.clone(),
        mode,
        sample_shape: sample_shape.to_vec(),
        layer_shape,
        classes,
        attention,
        layers,
        head,
        pre_act: vec![],
        pooled_shape: vec![],
        keep_output_grads: false,
    })
}

/// Softmax cross-entropy averaged over the batch: `(loss, dlogits, correct)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor, usize) {
    let k = logits.last_extent();
    let b = labels.len();
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            grad[i * k + j] = ((v - lse).exp() - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
        let arg = row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
        correct += usize::from(arg == y);
    }
    (loss / b as f64, Tensor::new(vec![b, k], grad).expect("logit shape"), correct)
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Re-represents every compressed layer for `mode`, starting from its
    /// current effective weight. Optimizer and activation state are dropped.
    pub fn convert(&self, mode: Mode, epsilon: f64, seed: u64) -> Result<Model> {
        let mut m = self.clone();
        m.mode = mode;
        for (idx, layer) in m.layers.iter_mut().enumerate() {
            *layer = WasiLinear::new(layer.effective_weight(), mode, epsilon, seed ^ (0xa51_0000 + idx as u64))?;
        }
        for p in [&mut m.head].into_iter().chain(m.attention.iter_mut().flat_map(|a| a.parts_mut())) {
            p.vw = None;
            p.vb = None;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn layers(&self) -> &[WasiLinear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [WasiLinear] {
        &mut self.layers
    }

    /// Input extents seen by compressed layer `i` for a batch of `b`.
    pub fn layer_input_dims(&self, i: usize, b: usize) -> Vec<usize> {
        let mut d = vec![b];
        d.extend(&self.layer_shape[..self.layer_shape.len() - 1]);
        d.push(self.layers[i].in_features());
        d
    }

    /// Stored weight elements over compressed layers.
    pub fn parameter_count(&self) -> u64 {
        self.layers.iter().map(|l| l.memory().weight_elements).sum()
    }

    fn to_layer_view(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        if x.shape()[1..] != self.sample_shape[..] {
            return Err(Error::Shape(format!("batch {:?} does not hold samples of {:?}", x.shape(), self.sample_shape)));
        }
        let mut shape = vec![b];
        shape.extend(&self.layer_shape);
        x.reshape(&shape)
    }

    pub fn forward(&mut self, x: &Tensor, ctx: StepCtx) -> Result<Tensor> {
        let mut h = self.to_layer_view(x)?;
        self.pre_act.clear();
        if let Some(att) = self.attention.as_mut() {
            let h0 = h.add(&att.forward(&h, ctx)?)?;
            let a1 = self.layers[0].forward(&h0, ctx)?;
            let g1 = map(&a1, gelu);
            let a2 = self.layers[1].forward(&g1, ctx)?;
            if ctx.train {
                self.pre_act.push(a1);
            }
            h = h0.add(&a2)?;
        } else {
            for layer in self.layers.iter_mut() {
                let a = layer.forward(&h, ctx)?;
                h = map(&a, gelu);
                if ctx.train {
                    self.pre_act.push(a);
                }
            }
        }
        self.pooled_shape = h.shape().to_vec();
        self.head.forward(&mean_pool(&h), ctx)
    }

    pub fn backward(&mut self, dlogits: &Tensor) -> Result<()> {
        let keep = self.keep_output_grads;
        let dpool = self.head.backward(dlogits)?;
        let dh = mean_pool_backward(&dpool, &self.pooled_shape);
        if let Some(att) = self.attention.as_mut() {
            let dg1 = self.layers[1].backward(&dh, keep)?;
            let da1 = gelu_backward(&self.pre_act[0], &dg1);
            let dh0 = dh.add(&self.layers[0].backward(&da1, keep)?)?;
            att.backward(&dh0)?;
        } else {
            let mut d = dh;
            for i in (0..self.layers.len()).rev() {
                let da = gelu_backward(&self.pre_act[i], &d);
                d = self.layers[i].backward(&da, keep)?;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        let mut sq: f64 = self.layers.iter().filter_map(|l| l.grad()).map(|g| g.frobenius_norm_sq()).sum();
        sq += self.head.grad_norm_sq();
        if let Some(att) = &self.attention {
            sq += att.parts().iter().map(|p| p.grad_norm_sq()).sum::<f64>();
        }
        sq.sqrt()
    }

    pub fn update(&mut self, u: &UpdateCtx) -> Result<()> {
        for l in self.layers.iter_mut() {
            l.update(u)?;
        }
        self.head.update(u)?;
        if let Some(att) = self.attention.as_mut() {
            for p in att.parts_mut() {
                p.update(u)?;
            }
        }
        Ok(())
    }

    /// `(mean loss, accuracy)` over `x` without caching anything.
    pub fn evaluate(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
        let logits = self.forward(x, StepCtx::EVAL)?;
        let (loss, _, correct) = cross_entropy(&logits, labels);
        Ok((loss, correct as f64 / labels.len() as f64))
    }

    /// Sets ASI ranks per compressed layer (`None` disables compression).
    pub fn set_activation_ranks(&mut self, ranks: Option<Vec<Vec<usize>>>) -> Result<()> {
        if let Some(r) = &ranks {
            if r.len() != self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} rank vectors for {} compressed layers",
                    r.len(),
                    self.layers.len()
                )));
            }
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.set_activation_ranks(ranks.as_ref().map(|r| r[i].clone()));
        }
        Ok(())
    }

    /// Exact activations and output gradients of every compressed layer on
    /// one batch, leaving the model untouched.
    pub fn probe_batch(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<LayerProbe>> {
        let mut m = self.clone();
        m.keep_output_grads = true;
        let logits = m.forward(x, StepCtx::PROBE)?;
        let (_, dlogits, _) = cross_entropy(&logits, labels);
        m.backward(&dlogits)?;
        m.layers
            .iter_mut()
            .map(|l| {
                Ok(LayerProbe {
                    activation: l.input.take().expect("exact forward caches inputs"),
                    output_grad: l.output_grad.take().expect("probe keeps output gradients"),
                })
            })
            .collect()
    }

    pub fn instrument_counters(&self) -> CounterSnapshot {
        CounterSnapshot { layers: self.layers.iter().map(|l| l.memory()).collect(), ops: counters::snapshot() }
    }

    /// Dense parameters outside the compressed layers: `(name, shape, data)`.
    pub fn dense_blobs(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = vec![("head.W".to_string(), vec![self.head.w.rows(), self.head.w.cols()], self.head.w.data().to_vec())];
        if let Some(b) = &self.head.b {
            out.push(("head.b".into(), vec![b.len()], b.clone()));
        }
        if let Some(att) = &self.attention {
            for (name, p) in ["q", "k", "v", "o"].iter().zip(att.parts()) {
                out.push((format!("attn.W{name}"), vec![p.w.rows(), p.w.cols()], p.w.data().to_vec()));
            }
        }
        out
    }
}

/// A model together with the held-out batch it is probed on.
pub struct HeldOutProbe<'a> {
    pub model: &'a Model,
    pub x: &'a Tensor,
    pub labels: &'a [usize],
}

impl ActivationProbe for HeldOutProbe<'_> {
    fn probe(&self) -> Result<Vec<LayerProbe>> {
        self.model.probe_batch(self.x, self.labels)
    }
}

impl AsiRefresh {
    /// Whether ASI recomputes factors on `step` (zero-based within an epoch).
    pub fn refresh_on(self, step: usize) -> bool {
        match self {
            AsiRefresh::PerIteration => true,
            AsiRefresh::PerEpoch => step == 0,
        }
    }
}

/// Exact factorization keeping every singular value, however small.
fn full_factors(w: &Matrix) -> Result<LowRankWeight> {
    let d = svd(w)?;
    let k = w.rows().min(w.cols());
    let left = Matrix::from_fn(w.rows(), k, |i, j| d.u.get(i, j) * d.singular_values[j]);
    let right = Matrix::from_fn(k, w.cols(), |i, j| d.v.get(j, i));
    LowRankWeight::from_factors(left, right, 1.0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::rank_bounds;
    use crate::numdiff::finite_difference_gradient;
    use crate::rank_select::activation_memory;

    fn batch(seed: u64, shape: &[usize]) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::random_normal(shape, &mut rng).unwrap();
        let labels = (0..shape[0]).map(|i| i % 3).collect();
        (x, labels)
    }

    fn spec(kind: ModelKind, hidden: Vec<usize>) -> ModelSpec {
        ModelSpec { kind, hidden, init: Init::Gaussian, window: None }
    }

    #[test]
    fn parameter_counts() {
        let s = spec(ModelKind::Mlp, vec![6, 5]);
        let m = build_model(&s, Mode::Wasi, 0.8, &[4, 8], 3, 1).unwrap();
        let want: u64 = m.layers().iter().map(|l| {
            let k = l.rank().unwrap() as u64;
            k * (l.in_features() + l.out_features()) as u64
        }).sum();
        assert_eq!(m.layers().len(), 2);
        assert_eq!(m.parameter_count(), want);
        let v = build_model(&s, Mode::Vanilla, 0.8, &[4, 8], 3, 1).unwrap();
        assert_eq!(v.parameter_count(), 8 * 6 + 6 * 5);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let s = ModelSpec::default();
        let a = build_model(&s, Mode::Vanilla, 1.0, &[4, 8], 3, 7).unwrap();
        let b = build_model(&s, Mode::Vanilla, 1.0, &[4, 8], 3, 7).unwrap();
        let c = build_model(&s, Mode::Vanilla, 1.0, &[4, 8], 3, 8).unwrap();
        for i in 0..2 {
            assert_eq!(a.layers()[i].effective_weight(), b.layers()[i].effective_weight());
            assert_ne!(a.layers()[i].effective_weight(), c.layers()[i].effective_weight());
        }
    }

    #[test]
    fn spectral_init_decays() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = init_weight(12, 10, &Init::Spectral { decay: 0.5 }, &mut rng).unwrap();
        let s = crate::linalg::svd(&w).unwrap().singular_values;
        for j in 1..10 {
            assert!((s[j] / s[j - 1] - 0.5).abs() < 1e-9);
        }
        assert!((w.frobenius_norm_sq() - 12.0).abs() < 1e-9);
    }

    #[test]
    fn forward_multiply_count() {
        let lr = LowRankWeight::from_factors(
            Matrix::random_normal(6, 3, &mut ChaCha8Rng::seed_from_u64(2)),
            Matrix::random_normal(3, 8, &mut ChaCha8Rng::seed_from_u64(3)),
            1.0,
            1,
        )
        .unwrap();
        let mut layer = WasiLinear::new(Matrix::zeros(6, 8), Mode::Vanilla, 1.0, 0).unwrap();
        layer.weight = WeightRepr::LowRank(lr);
        let x = Tensor::random_normal(&[2, 4, 8], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        counters::reset();
        layer.forward(&x, StepCtx::EVAL).unwrap();
        assert_eq!(counters::snapshot().mults, 336);
        counters::reset();
        assert_eq!(counters::snapshot(), OpCounts::default());
    }

    fn loss_of(m: &mut Model, x: &Tensor, y: &[usize]) -> f64 {
        let logits = m.forward(x, StepCtx::EVAL).unwrap();
        cross_entropy(&logits, y).0
    }

    fn check_gradients(kind: ModelKind, hidden: Vec<usize>, shape: &[usize]) {
        let (x, y) = batch(5, shape);
        let mut m = build_model(&spec(kind, hidden), Mode::Wasi, 0.9, &shape[1..], 3, 3).unwrap();
        let ranks: Vec<Vec<usize>> = (0..m.layers().len())
            .map(|i| rank_bounds(&m.layer_input_dims(i, shape[0])))
            .collect();
        m.set_activation_ranks(Some(ranks)).unwrap();
        let logits = m.forward(&x, StepCtx::TRAIN).unwrap();
        let (_, d, _) = cross_entropy(&logits, &y);
        m.backward(&d).unwrap();
        for i in 0..m.layers().len() {
            let analytic = m.layers()[i].grad().unwrap().clone();
            let w0 = m.layers()[i].effective_weight();
            let mut probe = m.clone();
            let fd = finite_difference_gradient(
                |t| {
                    let w = Matrix::new(w0.rows(), w0.cols(), t.data().to_vec()).unwrap();
                    probe.layers_mut()[i].set_effective_weight(&w).unwrap();
                    loss_of(&mut probe, &x, &y)
                },
                &Tensor::from_matrix(&w0),
                1e-5,
            );
            for (a, f) in analytic.data().iter().zip(fd.data()) {
                assert!((a - f).abs() <= 1e-6 * (1.0 + a.abs()), "layer {i}: {a} vs {f}");
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        check_gradients(ModelKind::Mlp, vec![5, 4], &[3, 2, 6]);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        check_gradients(ModelKind::Block, vec![5], &[2, 3, 4]);
    }

    #[test]
    fn windowed_gradients_match_finite_differences() {
        check_gradients(ModelKind::Windowed, vec![5, 4], &[2, 4, 3]);
    }

    #[test]
    fn attention_input_gradient() {
        let (x, y) = batch(9, &[2, 3, 4]);
        let m0 = build_model(&spec(ModelKind::Block, vec![5]), Mode::Vanilla, 1.0, &[3, 4], 3, 4).unwrap();
        let mut m = m0.clone();
        let logits = m.forward(&x, StepCtx::TRAIN).unwrap();
        let (_, d, _) = cross_entropy(&logits, &y);
        m.backward(&d).unwrap();
        let gq = m.attention.as_ref().unwrap().q.gw.clone().unwrap();
        let wq = m0.attention.as_ref().unwrap().q.w.clone();
        let mut probe = m0.clone();
        let fd = finite_difference_gradient(
            |t| {
                probe.attention.as_mut().unwrap().q.w = Matrix::new(4, 4, t.data().to_vec()).unwrap();
                loss_of(&mut probe, &x, &y)
            },
            &Tensor::from_matrix(&wq),
            1e-5,
        );
        for (a, f) in gq.data().iter().zip(fd.data()) {
            assert!((a - f).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {f}");
        }
    }

    #[test]
    fn stored_elements_match_formulas() {
        let shape = [4, 3, 6];
        let (x, y) = batch(10, &shape);
        let mut m = build_model(&spec(ModelKind::Mlp, vec![5, 4]), Mode::Wasi, 0.9, &shape[1..], 3, 2).unwrap();
        m.set_activation_ranks(Some(vec![vec![2, 2, 3], vec![3, 2, 2]])).unwrap();
        let logits = m.forward(&x, StepCtx::TRAIN).unwrap();
        let (_, d, _) = cross_entropy(&logits, &y);
        m.backward(&d).unwrap();
        let snap = m.instrument_counters();
        for (i, l) in snap.layers.iter().enumerate() {
            let k = l.weight_rank as u64;
            assert_eq!(l.weight_elements, k * (l.in_features + l.out_features) as u64);
            let dims = m.layer_input_dims(i, 4);
            assert_eq!(l.activation_dims, dims);
            assert_eq!(l.activation_elements, activation_memory(l.activation_ranks.as_ref().unwrap(), &dims));
        }
    }

    #[test]
    fn probe_leaves_model_untouched() {
        let shape = [4, 3, 6];
        let (x, y) = batch(11, &shape);
        let m = build_model(&spec(ModelKind::Mlp, vec![5, 4]), Mode::Wasi, 0.9, &shape[1..], 3, 2).unwrap();
        let probes = HeldOutProbe { model: &m, x: &x, labels: &y }.probe().unwrap();
        assert_eq!(probes.len(), 2);
        assert_eq!(probes[0].activation, x);
        assert_eq!(probes[1].activation.shape(), &[4, 3, 5]);
        assert_eq!(probes[1].output_grad.shape(), &[4, 3, 4]);
        assert!(m.layers()[0].grad().is_none());
    }

    #[test]
    fn per_epoch_refresh_reuses_factors() {
        let shape = [4, 3, 6];
        let mut m = build_model(&spec(ModelKind::Mlp, vec![5]), Mode::Wasi, 0.9, &shape[1..], 3, 2).unwrap();
        m.set_activation_ranks(Some(vec![vec![2, 2, 2]])).unwrap();
        let (x1, _) = batch(12, &shape);
        let (x2, _) = batch(13, &shape);
        m.forward(&x1, StepCtx::TRAIN).unwrap();
        let f1 = m.layers()[0].tucker().unwrap().factors().to_vec();
        m.forward(&x2, StepCtx { refresh_factors: false, ..StepCtx::TRAIN }).unwrap();
        assert_eq!(m.layers()[0].tucker().unwrap().factors(), &f1[..]);
        m.forward(&x2, StepCtx::TRAIN).unwrap();
        assert_ne!(m.layers()[0].tucker().unwrap().factors(), &f1[..]);
    }

    #[test]
    fn bad_specs() {
        let s = spec(ModelKind::Block, vec![4, 4]);
        assert!(build_model(&s, Mode::Wasi, 0.9, &[3, 4], 3, 0).is_err());
        assert!(build_model(&spec(ModelKind::Mlp, vec![]), Mode::Wasi, 0.9, &[3, 4], 3, 0).is_err());
        assert!(build_model(&ModelSpec::default(), Mode::Wasi, 0.9, &[12], 3, 0).is_err());
        let w = ModelSpec { window: Some([2, 5]), ..spec(ModelKind::Windowed, vec![4]) };
        assert!(build_model(&w, Mode::Wasi, 0.9, &[12, 4], 3, 0).is_err());
        assert_eq!(window_of(12), [3, 4]);
        assert_eq!(window_of(7), [1, 7]);
    }

    #[test]
    fn cross_entropy_by_hand() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (l, g, c) = cross_entropy(&logits, &[1]);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.data(), &[0.5, -0.5]);
        assert_eq!(c, 0);
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }
}
