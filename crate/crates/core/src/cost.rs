//! Closed-form FLOP and memory counts for one linear layer, vanilla against
//! low-rank, with the four compression/speedup ratios and a grid sweep.
//!
//! FLOPs count a multiply–add as two. Memory is in stored elements.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::activation::{check_ranks, rank_bounds};
use crate::error::{Error, Result};
use crate::rank_select::activation_memory;

/// Batch `B`, token extents (`N`, or `H, W`), features `I → O`, weight rank
/// `K` and activation ranks over the input modes `(B, .., I)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub batch: usize,
    pub spatial: Vec<usize>,
    pub in_features: usize,
    pub out_features: usize,
    pub weight_rank: usize,
    pub activation_ranks: Vec<usize>,
}

impl LayerShape {
    /// Input activation extents `(B, spatial.., I)`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.batch];
        d.extend(&self.spatial);
        d.push(self.in_features);
        d
    }

    pub fn tokens(&self) -> u64 {
        self.spatial.iter().map(|&s| s as u64).product()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.spatial.len()) {
            return Err(Error::Shape(format!("expected 1 or 2 token extents, got {:?}", self.spatial)));
        }
        if self.dims().contains(&0) || self.out_features == 0 {
            return Err(Error::Shape("extents must be positive".into()));
        }
        let kmax = self.in_features.min(self.out_features);
        if self.weight_rank == 0 || self.weight_rank > kmax {
            return Err(Error::InvalidArgument(format!(
                "weight rank {} outside [1, {kmax}]",
                self.weight_rank
            )));
        }
        check_ranks(&self.dims(), &self.activation_ranks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub shape: LayerShape,
    pub f_vanilla: u64,
    pub b_vanilla: u64,
    pub f_wasi: u64,
    pub o_wsi: u64,
    pub o_asi: u64,
    pub b_wasi: u64,
    pub m_w_vanilla: u64,
    pub m_a_vanilla: u64,
    pub m_w_wasi: u64,
    pub m_a_wasi: u64,
    pub c_training: f64,
    pub c_inference: f64,
    pub s_training: f64,
    pub s_inference: f64,
}

/// `(2·B·N·I·O, 4·B·N·I·O)`.
pub fn flops_vanilla(s: &LayerShape) -> (u64, u64) {
    let dense = s.batch as u64 * s.tokens() * s.in_features as u64 * s.out_features as u64;
    (2 * dense, 4 * dense)
}

/// Per-mode subspace-iteration cost `Σ_m 4·d·d′·r + 2·d·r²`, with `d′` the
/// product of the other extents.
pub fn asi_overhead(dims: &[usize], ranks: &[usize]) -> u64 {
    let total: u64 = dims.iter().map(|&d| d as u64).product();
    dims.iter()
        .zip(ranks)
        .map(|(&d, &r)| {
            let (d, r) = (d as u64, r as u64);
            let rest = total / d;
            4 * d * rest * r + 2 * d * r * r
        })
        .sum()
}

/// `(F_wasi, O_wsi, O_asi, B_wasi)`.
///
/// Order-3 inputs use the five-term backward sum term by term. Order-4
/// inputs (`B × H × W × I`) use the terms of the staged contraction in
/// [`crate::autodiff::grad_weight_lowrank_4d`], one per stage, in the same
/// one-count-per-multiply–add convention.
pub fn flops_wasi(s: &LayerShape) -> (u64, u64, u64, u64) {
    let (b, n) = (s.batch as u64, s.tokens());
    let (i, o, k) = (s.in_features as u64, s.out_features as u64, s.weight_rank as u64);
    let r: Vec<u64> = s.activation_ranks.iter().map(|&x| x as u64).collect();

    let f = 2 * b * n * k * (i + o);
    let o_wsi = 4 * i * o * k + 2 * o * k * k;
    let o_asi = asi_overhead(&s.dims(), &s.activation_ranks);
    let contraction = match s.spatial.len() {
        1 => b * n * o * r[0] + r[0] * r[1] * r[2] * n + r[0] * r[2] * i * n + r[0] * i * o * n,
        _ => {
            let (h, w) = (s.spatial[0] as u64, s.spatial[1] as u64);
            r[0] * b * h * w * o
                + r[0] * h * w * r[2] * o
                + r[0] * r[1] * r[2] * r[3] * h
                + r[0] * h * r[2] * r[3] * i
                + r[0] * h * r[2] * o * i
        }
    };
    (f, o_wsi, o_asi, f + contraction)
}

/// `(M_w_vanilla, M_a_vanilla, M_w_wasi, M_a_wasi)`.
pub fn memory_counts(s: &LayerShape) -> (u64, u64, u64, u64) {
    let (i, o, k) = (s.in_features as u64, s.out_features as u64, s.weight_rank as u64);
    let m_a_vanilla: u64 = s.dims().iter().map(|&d| d as u64).product();
    (i * o, m_a_vanilla, k * (i + o), activation_memory(&s.activation_ranks, &s.dims()))
}

fn quotient(num: u64, den: u64, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::InvalidArgument(format!("{what}: zero denominator")));
    }
    Ok(num as f64 / den as f64)
}

/// `(C_training, C_inference, S_training, S_inference)` from the raw counts
/// of a report; the ratio fields of `r` are ignored.
pub fn ratios(r: &CostReport) -> Result<(f64, f64, f64, f64)> {
    Ok((
        quotient(r.m_w_vanilla + r.m_a_vanilla, r.m_w_wasi + r.m_a_wasi, "C_training")?,
        quotient(r.m_w_vanilla, r.m_w_wasi, "C_inference")?,
        quotient(r.f_vanilla + r.b_vanilla, r.f_wasi + r.o_wsi + r.o_asi + r.b_wasi, "S_training")?,
        quotient(r.f_vanilla, r.f_wasi, "S_inference")?,
    ))
}

impl CostReport {
    pub fn new(shape: &LayerShape) -> Result<Self> {
        shape.validate()?;
        let (f_vanilla, b_vanilla) = flops_vanilla(shape);
        let (f_wasi, o_wsi, o_asi, b_wasi) = flops_wasi(shape);
        let (m_w_vanilla, m_a_vanilla, m_w_wasi, m_a_wasi) = memory_counts(shape);
        let mut r = CostReport {
            shape: shape.clone(),
            f_vanilla,
            b_vanilla,
            f_wasi,
            o_wsi,
            o_asi,
            b_wasi,
            m_w_vanilla,
            m_a_vanilla,
            m_w_wasi,
            m_a_wasi,
            c_training: 0.0,
            c_inference: 0.0,
            s_training: 0.0,
            s_inference: 0.0,
        };
        (r.c_training, r.c_inference, r.s_training, r.s_inference) = ratios(&r)?;
        Ok(r)
    }

    /// `F_wasi + O_wsi + O_asi + B_wasi`.
    pub fn wasi_step_flops(&self) -> u64 {
        self.f_wasi + self.o_wsi + self.o_asi + self.b_wasi
    }
}

/// How activation ranks are chosen at each sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankRule {
    /// The given ranks; points where they do not fit are skipped.
    Fixed(Vec<usize>),
    /// Every mode at its unfolding bound.
    Full,
    /// `min(r, bound)` on every mode.
    Uniform(usize),
    /// `min(K, bound)` on every mode.
    MatchWeight,
}

impl RankRule {
    pub fn ranks(&self, dims: &[usize], k: usize) -> Vec<usize> {
        let bounds = rank_bounds(dims);
        match self {
            RankRule::Fixed(r) => r.clone(),
            RankRule::Full => bounds,
            RankRule::Uniform(r) => bounds.iter().map(|&b| b.min(*r)).collect(),
            RankRule::MatchWeight => bounds.iter().map(|&b| b.min(k)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub batch: Vec<usize>,
    pub spatial: Vec<Vec<usize>>,
    /// `(I, O)` pairs.
    pub features: Vec<(usize, usize)>,
    pub weight_ranks: Vec<usize>,
    pub activation_ranks: Vec<RankRule>,
}

/// One report per valid grid point, in nested grid order. Points whose
/// ranks do not fit their shape are skipped.
pub fn sweep(grid: &SweepGrid) -> Result<Vec<CostReport>> {
    if grid.batch.is_empty()
        || grid.spatial.is_empty()
        || grid.features.is_empty()
        || grid.weight_ranks.is_empty()
        || grid.activation_ranks.is_empty()
    {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let mut out = Vec::new();
    for &batch in &grid.batch {
        for spatial in &grid.spatial {
            for &(i, o) in &grid.features {
                for &k in &grid.weight_ranks {
                    for rule in &grid.activation_ranks {
                        let mut shape = LayerShape {
                            batch,
                            spatial: spatial.clone(),
                            in_features: i,
                            out_features: o,
                            weight_rank: k,
                            activation_ranks: vec![],
                        };
                        shape.activation_ranks = rule.ranks(&shape.dims(), k);
                        if shape.validate().is_ok() {
                            out.push(CostReport::new(&shape)?);
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no grid point has valid ranks".into()));
    }
    Ok(out)
}

/// `%g`-style formatting with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.5e}");
        let (mant, e) = s.split_once('e').expect("exponent");
        let mant = if mant.contains('.') { mant.trim_end_matches('0').trim_end_matches('.') } else { mant };
        format!("{mant}e{e}")
    }
}

pub const CSV_HEADER: [&str; 20] = [
    "batch",
    "spatial",
    "in_features",
    "out_features",
    "weight_rank",
    "activation_ranks",
    "f_vanilla",
    "b_vanilla",
    "f_wasi",
    "o_wsi",
    "o_asi",
    "b_wasi",
    "m_w_vanilla",
    "m_a_vanilla",
    "m_w_wasi",
    "m_a_wasi",
    "c_training",
    "c_inference",
    "s_training",
    "s_inference",
];

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")
}

/// Comma-separated, header first, `\n` line ends; extents joined with `x`.
pub fn write_csv<W: Write>(reports: &[CostReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let wrap = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(wrap)?;
    for r in reports {
        let s = &r.shape;
        let row = [
            s.batch.to_string(),
            join(&s.spatial),
            s.in_features.to_string(),
            s.out_features.to_string(),
            s.weight_rank.to_string(),
            join(&s.activation_ranks),
            r.f_vanilla.to_string(),
            r.b_vanilla.to_string(),
            r.f_wasi.to_string(),
            r.o_wsi.to_string(),
            r.o_asi.to_string(),
            r.b_wasi.to_string(),
            r.m_w_vanilla.to_string(),
            r.m_a_vanilla.to_string(),
            r.m_w_wasi.to_string(),
            r.m_a_wasi.to_string(),
            sig6(r.c_training),
            sig6(r.c_inference),
            sig6(r.s_training),
            sig6(r.s_inference),
        ];
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(())
}
