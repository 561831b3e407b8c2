//! Activation rank selection ahead of training.
//!
//! A held-out batch is pushed through the model once; for every layer and
//! every explained-variance threshold the cached input is HOSVD-compressed
//! and the resulting weight gradient compared with the exact one. The
//! Frobenius gap is the layer's "perplexity" at that threshold. Two exact
//! searches then pick one threshold per layer: least perplexity under a
//! memory budget, or least memory under a perplexity target.

use serde::{Deserialize, Serialize};

use crate::activation::{check_ranks, hosvd, TuckerSpec};
use crate::autodiff::{grad_weight_dense, grad_weight_lowrank};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input activation and output gradient of one layer on the held-out batch.
#[derive(Clone, Debug)]
pub struct LayerProbe {
    pub activation: Tensor,
    pub output_grad: Tensor,
}

/// Anything that can run a held-out forward/backward pass with exact
/// activations and report what each compressible layer saw.
pub trait ActivationProbe {
    fn probe(&self) -> Result<Vec<LayerProbe>>;
}

impl ActivationProbe for [LayerProbe] {
    fn probe(&self) -> Result<Vec<LayerProbe>> {
        Ok(self.to_vec())
    }
}

impl ActivationProbe for Vec<LayerProbe> {
    fn probe(&self) -> Result<Vec<LayerProbe>> {
        Ok(self.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityTable {
    /// Ascending, in (0, 1].
    pub thresholds: Vec<f64>,
    /// `perplexity[layer][threshold]`.
    pub perplexity: Vec<Vec<f64>>,
    /// `ranks[layer][threshold][mode]`.
    pub ranks: Vec<Vec<Vec<usize>>>,
    /// Activation shape per layer.
    pub dims: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub threshold_indices: Vec<usize>,
    pub ranks: Vec<Vec<usize>>,
    pub memory: u64,
    pub perplexity: f64,
}

/// `Π r_m + Σ D_m·r_m`, the elements held by a Tucker activation.
pub fn activation_memory(ranks: &[usize], dims: &[usize]) -> u64 {
    assert_eq!(ranks.len(), dims.len(), "ranks and dims must have the same length");
    let core: u64 = ranks.iter().map(|&r| r as u64).product();
    let factors: u64 = ranks.iter().zip(dims).map(|(&r, &d)| (r * d) as u64).sum();
    core + factors
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    for (j, &t) in thresholds.iter().enumerate() {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {t} outside (0, 1]")));
        }
        if j > 0 && t <= thresholds[j - 1] {
            return Err(Error::InvalidArgument("thresholds must be strictly ascending".into()));
        }
    }
    Ok(())
}

fn scan_cell(layer: &LayerProbe, exact: &crate::matrix::Matrix, eps: f64) -> Result<(f64, Vec<usize>)> {
    let ta = hosvd(&layer.activation, &TuckerSpec::Threshold(eps))?;
    let approx = grad_weight_lowrank(&ta, &layer.output_grad)?;
    Ok((exact.distance(&approx), ta.ranks().to_vec()))
}

fn scan_layers(layers: &[LayerProbe], thresholds: &[f64], threads: usize) -> Result<PerplexityTable> {
    check_thresholds(thresholds)?;
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no compressible layers to scan".into()));
    }
    let mut exact = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        if l.activation.frobenius_norm() == 0.0 {
            return Err(Error::InvalidArgument(format!("degenerate held-out batch: layer {i} input is all zero")));
        }
        exact.push(grad_weight_dense(&l.activation, &l.output_grad)?);
    }

    // Each (layer, threshold) cell is independent; columns are split across
    // workers and written back by index, so the table does not depend on
    // the worker count.
    let cells: Vec<(usize, usize)> =
        (0..layers.len()).flat_map(|i| (0..thresholds.len()).map(move |j| (i, j))).collect();
    let threads = threads.clamp(1, cells.len());
    let chunk = cells.len().div_ceil(threads);
    let results: Vec<Result<(f64, Vec<usize>)>> = if threads == 1 {
        cells.iter().map(|&(i, j)| scan_cell(&layers[i], &exact[i], thresholds[j])).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .chunks(chunk)
                .map(|part| {
                    let exact = &exact;
                    s.spawn(move || {
                        part.iter()
                            .map(|&(i, j)| scan_cell(&layers[i], &exact[i], thresholds[j]))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("scan worker panicked")).collect()
        })
    };

    let e = thresholds.len();
    let mut perplexity = vec![Vec::with_capacity(e); layers.len()];
    let mut ranks = vec![Vec::with_capacity(e); layers.len()];
    for (&(i, _), r) in cells.iter().zip(results) {
        let (p, rk) = r?;
        perplexity[i].push(p);
        ranks[i].push(rk);
    }
    Ok(PerplexityTable {
        thresholds: thresholds.to_vec(),
        perplexity,
        ranks,
        dims: layers.iter().map(|l| l.activation.shape().to_vec()).collect(),
    })
}

/// Builds the perplexity table for `thresholds` (ascending, in (0, 1]).
///
/// Compressing one layer's cached input changes only that layer's weight
/// gradient, so a single exact backward pass supplies every output gradient
/// the per-threshold comparisons need.
pub fn perplexity_scan<P: ActivationProbe + ?Sized>(model: &P, thresholds: &[f64]) -> Result<PerplexityTable> {
    perplexity_scan_threaded(model, thresholds, 1)
}

/// [`perplexity_scan`] with table cells spread over `threads` workers.
pub fn perplexity_scan_threaded<P: ActivationProbe + ?Sized>(
    model: &P,
    thresholds: &[f64],
    threads: usize,
) -> Result<PerplexityTable> {
    let layers = model.probe()?;
    scan_layers(&layers, thresholds, threads)
}

impl PerplexityTable {
    pub fn layers(&self) -> usize {
        self.perplexity.len()
    }

    pub fn thresholds_len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn memory(&self, layer: usize, j: usize) -> u64 {
        activation_memory(&self.ranks[layer][j], &self.dims[layer])
    }

    pub fn validate(&self) -> Result<()> {
        check_thresholds(&self.thresholds)?;
        let (n, e) = (self.layers(), self.thresholds.len());
        if n == 0 {
            return Err(Error::InvalidArgument("table has no layers".into()));
        }
        if self.ranks.len() != n || self.dims.len() != n {
            return Err(Error::Shape("table rows disagree on layer count".into()));
        }
        for i in 0..n {
            if self.perplexity[i].len() != e || self.ranks[i].len() != e {
                return Err(Error::Shape(format!("layer {i} does not have {e} threshold columns")));
            }
            for j in 0..e {
                let p = self.perplexity[i][j];
                if !(p.is_finite() && p >= 0.0) {
                    return Err(Error::InvalidArgument(format!("perplexity[{i}][{j}] = {p}")));
                }
                check_ranks(&self.dims[i], &self.ranks[i][j])?;
            }
        }
        Ok(())
    }

    fn plan(&self, idx: &[usize]) -> RankPlan {
        RankPlan {
            threshold_indices: idx.to_vec(),
            ranks: idx.iter().enumerate().map(|(i, &j)| self.ranks[i][j].clone()).collect(),
            memory: idx.iter().enumerate().map(|(i, &j)| self.memory(i, j)).sum(),
            perplexity: total_perplexity(self, idx),
        }
    }

    /// The plan for an explicit threshold assignment.
    pub fn plan_for(&self, idx: &[usize]) -> Result<RankPlan> {
        if idx.len() != self.layers() || idx.iter().any(|&j| j >= self.thresholds.len()) {
            return Err(Error::InvalidArgument(format!("threshold indices {idx:?} do not fit the table")));
        }
        Ok(self.plan(idx))
    }
}

/// Sum in layer order; every candidate is totalled the same way so that
/// equal assignments compare equal.
fn total_perplexity(t: &PerplexityTable, idx: &[usize]) -> f64 {
    idx.iter().enumerate().fold(0.0, |acc, (i, &j)| acc + t.perplexity[i][j])
}

#[derive(Clone, Copy)]
struct Choice {
    j: usize,
    memory: u64,
    perplexity: f64,
}

/// Per-layer candidates with dominated thresholds removed. Option `a` is
/// dropped when some `b` is no worse on both axes and either strictly
/// cheaper in memory or earlier in index, which keeps every tie-break
/// winner of both searches.
fn candidates(t: &PerplexityTable) -> Vec<Vec<Choice>> {
    (0..t.layers())
        .map(|i| {
            let all: Vec<Choice> = (0..t.thresholds.len())
                .map(|j| Choice { j, memory: t.memory(i, j), perplexity: t.perplexity[i][j] })
                .collect();
            all.iter()
                .filter(|a| {
                    !all.iter().any(|b| {
                        b.j != a.j
                            && b.memory <= a.memory
                            && b.perplexity <= a.perplexity
                            && (b.memory < a.memory || b.j < a.j)
                    })
                })
                .copied()
                .collect()
        })
        .collect()
}

/// Slack for float lower bounds so pruning never discards a candidate that
/// could tie after rounding.
fn loosen(x: f64) -> f64 {
    x + x.abs() * 1e-12 + 1e-300
}

struct Search<'a> {
    table: &'a PerplexityTable,
    opts: Vec<Vec<Choice>>,
    /// Suffix minima over layers `i..`.
    min_mem_rest: Vec<u64>,
    min_perp_rest: Vec<f64>,
    idx: Vec<usize>,
    best: Option<(Vec<usize>, u64, f64)>,
}

impl<'a> Search<'a> {
    fn new(table: &'a PerplexityTable) -> Self {
        let opts = candidates(table);
        let n = table.layers();
        let mut min_mem_rest = vec![0u64; n + 1];
        let mut min_perp_rest = vec![0.0; n + 1];
        for i in (0..n).rev() {
            min_mem_rest[i] = min_mem_rest[i + 1] + opts[i].iter().map(|o| o.memory).min().unwrap();
            min_perp_rest[i] = min_perp_rest[i + 1] + opts[i].iter().map(|o| o.perplexity).fold(f64::INFINITY, f64::min);
        }
        Search { table, opts, min_mem_rest, min_perp_rest, idx: vec![0; n], best: None }
    }

    fn offer(&mut self, better: impl Fn(&(Vec<usize>, u64, f64), &(Vec<usize>, u64, f64)) -> bool) {
        let cand = (self.idx.clone(), self.idx.iter().enumerate().map(|(i, &j)| self.table.memory(i, j)).sum(), total_perplexity(self.table, &self.idx));
        if self.best.as_ref().is_none_or(|b| better(&cand, b)) {
            self.best = Some(cand);
        }
    }

    fn budget(&mut self, i: usize, mem: u64, perp: f64, budget: u64) {
        if mem + self.min_mem_rest[i] > budget {
            return;
        }
        if i == self.table.layers() {
            self.offer(|a, b| {
                (a.2, a.1, &a.0).partial_cmp(&(b.2, b.1, &b.0)) == Some(std::cmp::Ordering::Less)
            });
            return;
        }
        if let Some(b) = &self.best {
            if perp + self.min_perp_rest[i] > loosen(b.2) {
                return;
            }
        }
        for k in 0..self.opts[i].len() {
            let o = self.opts[i][k];
            self.idx[i] = o.j;
            self.budget(i + 1, mem + o.memory, perp + o.perplexity, budget);
        }
    }

    fn target(&mut self, i: usize, mem: u64, perp: f64, tau: f64) {
        if i == self.table.layers() {
            if total_perplexity(self.table, &self.idx) <= tau {
                self.offer(|a, b| {
                    (a.1, a.2, &a.0).partial_cmp(&(b.1, b.2, &b.0)) == Some(std::cmp::Ordering::Less)
                });
            }
            return;
        }
        if perp + self.min_perp_rest[i] > loosen(tau) {
            return;
        }
        if let Some(b) = &self.best {
            if mem + self.min_mem_rest[i] > b.1 {
                return;
            }
        }
        for k in 0..self.opts[i].len() {
            let o = self.opts[i][k];
            self.idx[i] = o.j;
            self.target(i + 1, mem + o.memory, perp + o.perplexity, tau);
        }
    }
}

/// Minimizes total perplexity subject to total activation memory ≤ `budget`.
/// Ties go to smaller memory, then to the lexicographically smaller
/// threshold assignment.
pub fn select_budget(table: &PerplexityTable, budget: u64) -> Result<RankPlan> {
    table.validate()?;
    let mut s = Search::new(table);
    if s.min_mem_rest[0] > budget {
        return Err(Error::Infeasible(format!(
            "budget {budget} is below the minimum activation memory {}",
            s.min_mem_rest[0]
        )));
    }
    s.budget(0, 0, 0.0, budget);
    let (idx, _, _) = s.best.expect("a feasible plan exists");
    Ok(table.plan(&idx))
}

/// Minimizes total activation memory subject to total perplexity ≤ `tau`.
/// Ties go to smaller perplexity, then to the lexicographically smaller
/// threshold assignment.
pub fn select_perplexity_target(table: &PerplexityTable, tau: f64) -> Result<RankPlan> {
    table.validate()?;
    if tau.is_nan() {
        return Err(Error::InvalidArgument("perplexity target is NaN".into()));
    }
    let mut s = Search::new(table);
    s.target(0, 0, 0.0, tau);
    match s.best {
        Some((idx, _, _)) => Ok(table.plan(&idx)),
        None => Err(Error::Infeasible(format!(
            "perplexity target {tau} is below the smallest achievable total {}",
            s.min_perp_rest[0]
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{asi_step, rank_bounds};
    use crate::matrix::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exhaustive(t: &PerplexityTable) -> Vec<Vec<usize>> {
        let (n, e) = (t.layers(), t.thresholds.len());
        (0..e.pow(n as u32))
            .map(|mut c| {
                (0..n)
                    .rev()
                    .map(|_| {
                        let j = c % e;
                        c /= e;
                        j
                    })
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect()
            })
            .collect()
    }

    fn oracle_budget(t: &PerplexityTable, budget: u64) -> Option<RankPlan> {
        exhaustive(t)
            .into_iter()
            .map(|idx| t.plan(&idx))
            .filter(|p| p.memory <= budget)
            .min_by(|a, b| {
                (a.perplexity, a.memory, &a.threshold_indices)
                    .partial_cmp(&(b.perplexity, b.memory, &b.threshold_indices))
                    .unwrap()
            })
    }

    fn oracle_target(t: &PerplexityTable, tau: f64) -> Option<RankPlan> {
        exhaustive(t)
            .into_iter()
            .map(|idx| t.plan(&idx))
            .filter(|p| p.perplexity <= tau)
            .min_by(|a, b| {
                (a.memory, a.perplexity, &a.threshold_indices)
                    .partial_cmp(&(b.memory, b.perplexity, &b.threshold_indices))
                    .unwrap()
            })
    }

    /// Ranks non-decreasing and perplexity non-increasing in the threshold
    /// index, as a scan produces them.
    fn random_table(rng: &mut impl Rng, layers: usize, e: usize) -> PerplexityTable {
        let mut t = PerplexityTable {
            thresholds: (1..=e).map(|j| j as f64 / e as f64).collect(),
            perplexity: vec![],
            ranks: vec![],
            dims: vec![],
        };
        for _ in 0..layers {
            let dims: Vec<usize> = (0..3).map(|_| rng.random_range(2..=8)).collect();
            let bounds = rank_bounds(&dims);
            let mut r: Vec<usize> = vec![1; 3];
            let mut p = rng.random_range(1.0..10.0);
            let mut rs = vec![];
            let mut ps = vec![];
            for _ in 0..e {
                for (m, b) in bounds.iter().enumerate() {
                    r[m] = rng.random_range(r[m]..=*b);
                }
                rs.push(r.clone());
                ps.push(p);
                p *= rng.random_range(0.0..1.0);
            }
            t.dims.push(dims);
            t.ranks.push(rs);
            t.perplexity.push(ps);
        }
        t
    }

    #[test]
    fn memory_formula() {
        assert_eq!(activation_memory(&[1, 2, 2], &[2, 4, 8]), 30);
        assert_eq!(activation_memory(&[1, 1, 1], &[5, 6, 7]), 1 + 18);
        assert_eq!(activation_memory(&[2, 3, 2, 2], &[4, 3, 3, 5]), 24 + 8 + 9 + 6 + 10);
    }

    #[test]
    fn memory_matches_stored_tucker() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::random_normal(&[3, 4, 5], &mut rng).unwrap();
        for ranks in [[1, 1, 1], [2, 3, 4], [3, 4, 5]] {
            let ta = asi_step(&a, &ranks, None, &mut rng).unwrap();
            assert_eq!(ta.stored_elements() as u64, activation_memory(&ranks, a.shape()));
        }
    }

    #[test]
    fn memory_strictly_increasing_in_each_rank() {
        let dims = [3, 4, 5];
        for m in 0..3 {
            let mut r = vec![1, 1, 1];
            let mut prev = activation_memory(&r, &dims);
            while r[m] < dims[m] {
                r[m] += 1;
                let now = activation_memory(&r, &dims);
                assert!(now > prev);
                prev = now;
            }
        }
    }

    #[test]
    fn searches_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = random_table(&mut rng, 4, 4);
            let lo: u64 = (0..4).map(|i| t.memory(i, 0)).sum();
            let hi: u64 = (0..4).map(|i| t.memory(i, 3)).sum();
            let budget = rng.random_range(lo..=hi);
            let plan = select_budget(&t, budget).unwrap();
            assert_eq!(Some(&plan), oracle_budget(&t, budget).as_ref());

            let pmin: f64 = (0..4).map(|i| t.perplexity[i][3]).sum();
            let pmax: f64 = (0..4).map(|i| t.perplexity[i][0]).sum();
            let tau = rng.random_range(pmin..=pmax);
            let tplan = select_perplexity_target(&t, tau).unwrap();
            assert_eq!(Some(&tplan), oracle_target(&t, tau).as_ref());

            let dual = select_perplexity_target(&t, plan.perplexity).unwrap();
            assert!(dual.memory <= budget);
        }
    }

    #[test]
    fn ties_and_non_monotone_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut t = random_table(&mut rng, 3, 3);
            // Coarse values force ties in both objectives.
            for row in t.perplexity.iter_mut() {
                for p in row.iter_mut() {
                    *p = rng.random_range(0..3) as f64;
                }
            }
            for i in 0..3 {
                let r = t.ranks[i][0].clone();
                t.ranks[i][1] = r;
            }
            let hi: u64 = (0..3).map(|i| (0..3).map(|j| t.memory(i, j)).max().unwrap()).sum();
            for budget in [hi / 2, hi] {
                assert_eq!(select_budget(&t, budget).ok(), oracle_budget(&t, budget));
            }
            for tau in [0.0, 1.0, 3.0, 9.0] {
                assert_eq!(select_perplexity_target(&t, tau).ok(), oracle_target(&t, tau));
            }
        }
    }

    #[test]
    fn boundary_budgets_and_targets() {
        let mut t = random_table(&mut ChaCha8Rng::seed_from_u64(4), 4, 4);
        // Strictly growing memory makes the cheapest plan unique.
        for i in 0..4 {
            t.dims[i] = vec![8, 8, 8];
            t.ranks[i] = (1..=4).map(|r| vec![r; 3]).collect();
        }
        let lo: u64 = (0..4).map(|i| t.memory(i, 0)).sum();
        let hi: u64 = (0..4).map(|i| t.memory(i, 3)).sum();
        assert_eq!(select_budget(&t, u64::MAX).unwrap().threshold_indices, vec![3; 4]);
        assert_eq!(select_budget(&t, hi).unwrap().threshold_indices, vec![3; 4]);
        assert_eq!(select_budget(&t, lo).unwrap().threshold_indices, vec![0; 4]);
        assert!(matches!(select_budget(&t, lo - 1), Err(Error::Infeasible(_))));

        assert_eq!(select_perplexity_target(&t, f64::INFINITY).unwrap().threshold_indices, vec![0; 4]);
        let pmin = total_perplexity(&t, &[3; 4]);
        assert_eq!(select_perplexity_target(&t, pmin).unwrap().threshold_indices, vec![3; 4]);
        assert!(matches!(select_perplexity_target(&t, pmin * 0.5 - 1e-9), Err(Error::Infeasible(_))));
    }

    #[test]
    fn plan_invariants() {
        let t = random_table(&mut ChaCha8Rng::seed_from_u64(5), 3, 4);
        let p = t.plan_for(&[0, 2, 3]).unwrap();
        let want: u64 = (0..3).map(|i| activation_memory(&p.ranks[i], &t.dims[i])).sum();
        assert_eq!(p.memory, want);
        assert!(t.plan_for(&[0, 4, 0]).is_err());
        assert!(t.plan_for(&[0, 1]).is_err());
    }

    fn toy_probe(seed: u64) -> Vec<LayerProbe> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Tensor::random_normal(&[4, 5, 6], &mut rng).unwrap();
        // A decaying spectrum along the feature mode so thresholds matter.
        let mix = Matrix::from_fn(6, 6, |i, j| if i == j { 0.6f64.powi(i as i32) } else { 0.0 });
        let a1 = base.mode_product(&mix, 2).unwrap();
        let a2 = Tensor::random_normal(&[4, 2, 3, 5], &mut rng).unwrap();
        vec![
            LayerProbe { activation: a1, output_grad: Tensor::random_normal(&[4, 5, 3], &mut rng).unwrap() },
            LayerProbe { activation: a2, output_grad: Tensor::random_normal(&[4, 2, 3, 4], &mut rng).unwrap() },
        ]
    }

    #[test]
    fn scan_lossless_column_and_recomputation() {
        let probe = toy_probe(6);
        let eps = [0.5, 0.8, 0.95, 1.0];
        let t = perplexity_scan(&probe, &eps).unwrap();
        t.validate().unwrap();
        for i in 0..2 {
            assert!(t.perplexity[i][3] <= 1e-8, "{:?}", t.perplexity[i]);
            for j in 1..4 {
                assert!(t.perplexity[i][j] <= t.perplexity[i][j - 1] + 1e-12);
                assert!(t.ranks[i][j].iter().zip(&t.ranks[i][j - 1]).all(|(a, b)| a >= b));
            }
        }
        // From-scratch recomputation with the reconstructed activation.
        for (i, l) in probe.iter().enumerate() {
            for (j, &e) in eps.iter().enumerate() {
                let ta = hosvd(&l.activation, &TuckerSpec::Threshold(e)).unwrap();
                let g = grad_weight_dense(&ta.reconstruct(), &l.output_grad).unwrap();
                let exact = grad_weight_dense(&l.activation, &l.output_grad).unwrap();
                assert!((exact.distance(&g) - t.perplexity[i][j]).abs() <= 1e-10);
            }
        }
        let threaded = perplexity_scan_threaded(&probe, &eps, 3).unwrap();
        assert_eq!(threaded, t);
    }

    #[test]
    fn scan_errors() {
        let probe = toy_probe(7);
        assert!(perplexity_scan(&probe, &[]).is_err());
        assert!(perplexity_scan(&probe, &[0.9, 0.5]).is_err());
        assert!(perplexity_scan(&probe, &[0.0, 0.5]).is_err());
        let empty: Vec<LayerProbe> = vec![];
        assert!(perplexity_scan(&empty, &[0.5]).is_err());
        let zero = vec![LayerProbe {
            activation: Tensor::zeros(&[2, 2, 2]).unwrap(),
            output_grad: Tensor::zeros(&[2, 2, 2]).unwrap(),
        }];
        assert!(perplexity_scan(&zero, &[0.5]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = random_table(&mut ChaCha8Rng::seed_from_u64(8), 2, 3);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<PerplexityTable>(&s).unwrap(), t);
        let p = select_budget(&t, u64::MAX).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<RankPlan>(&s).unwrap(), p);
    }
}
