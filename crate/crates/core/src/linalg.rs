//! Orthogonalization and singular value decompositions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::counters;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Residual norms at or below this fraction of the input column norm count
/// as a collapsed direction.
const COLLAPSE_TOLERANCE: f64 = 1e-12;

/// Absolute slack when comparing cumulative explained variance to a threshold.
pub const VARIANCE_TOLERANCE: f64 = 1e-12;

const REPLACEMENT_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the components of `v` along each (orthonormal) vector in `basis`,
/// twice over. Returns nothing; counts its arithmetic.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    let n = v.len() as u64;
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            for (x, y) in v.iter_mut().zip(q) {
                *x -= c * y;
            }
        }
        counters::record(2 * n * basis.len() as u64, (2 * n - 1) * basis.len() as u64);
    }
}

/// Orthonormal basis for the column space of an `a × k` matrix (`a ≥ k`).
///
/// Modified Gram–Schmidt with one re-orthogonalization pass. A column whose
/// residual collapses below `1e-12 ·` its input norm is replaced by a seeded
/// Gaussian vector orthogonalized against the columns already accepted, so
/// the output always has `k` orthonormal columns and the result is a pure
/// function of the input.
///
/// # Panics
///
/// Panics if the matrix has fewer rows than columns.
pub fn orthogonalize(m: &Matrix) -> Matrix {
    let (a, k) = m.shape();
    assert!(a >= k, "orthogonalize needs rows >= cols, got {a}x{k}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = m.column(j);
        let input_norm = dot(&v, &v).sqrt();
        project_out(&mut v, &basis);
        let mut norm = dot(&v, &v).sqrt();
        counters::record(2 * a as u64, 2 * a as u64 - 1);
        if !(norm > COLLAPSE_TOLERANCE * input_norm) || norm == 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(REPLACEMENT_SEED ^ j as u64);
            loop {
                v = (0..a).map(|_| StandardNormal.sample(&mut rng)).collect();
                let fresh = dot(&v, &v).sqrt();
                project_out(&mut v, &basis);
                norm = dot(&v, &v).sqrt();
                if norm > 1e-8 * fresh {
                    break;
                }
            }
        }
        let inv = 1.0 / norm;
        v.iter_mut().for_each(|x| *x *= inv);
        counters::record(a as u64, 0);
        basis.push(v);
    }
    Matrix::from_fn(a, k, |i, j| basis[j][i])
}

/// Thin SVD `m = U · diag(s) · Vᵀ` with `p = min(rows, cols)` triplets,
/// singular values sorted in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| {
            self.u.get(i, j) * self.singular_values[j]
        });
        scaled.matmul_t(&self.v).expect("consistent factors")
    }
}

/// One-sided Jacobi SVD.
///
/// Rotations act on the columns of whichever orientation has fewer columns,
/// so the work scales with the smaller Gram dimension. Sorting is stable, so
/// equal singular values keep the order the sweeps produced.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

fn jacobi_tall(m: &Matrix) -> Result<Svd> {
    const MAX_SWEEPS: usize = 80;
    const TOL: f64 = 1e-15;
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let (r64, n64) = (rows as u64, n as u64);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                counters::record(3 * r64, 3 * (r64 - 1));
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
                counters::record(4 * (r64 + n64) + 8, 2 * (r64 + n64) + 5);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    counters::record(n64 * r64, n64 * (r64 - 1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let singular_values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let top = singular_values[0];
    // Directions with vanishing singular values carry no information; let
    // Gram–Schmidt supply orthonormal completions for them.
    let raw_u = Matrix::from_fn(rows, n, |i, j| {
        let src = order[j];
        if norms[src] > top * 1e-13 && norms[src] > 0.0 {
            cols[src][i] / norms[src]
        } else {
            0.0
        }
    });
    let u = orthogonalize(&raw_u);
    let v = Matrix::from_fn(n, n, |i, j| v[order[j]][i]);
    Ok(Svd {
        u,
        singular_values,
        v,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (a, b) = (&mut head[p], &mut tail[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Smallest `K ≥ 1` whose leading squared singular values carry at least a
/// fraction `epsilon` of the total, comparing with an absolute slack of
/// [`VARIANCE_TOLERANCE`]. Never exceeds the number of nonzero values.
pub fn explained_variance_rank(singular_values: &[f64], epsilon: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let nonzero = singular_values.iter().filter(|s| **s > 0.0).count().max(1);
    let mut cum = 0.0;
    for (k, s) in singular_values.iter().enumerate() {
        cum += s * s / total;
        if cum >= epsilon - VARIANCE_TOLERANCE {
            return (k + 1).min(nonzero);
        }
    }
    nonzero
}

/// Rank-`K` factors `L = U_K Σ_K` (`O × K`) and `R = V_Kᵀ` (`K × I`).
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub left: Matrix,
    pub right: Matrix,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

/// Truncated SVD keeping the smallest rank that explains a fraction
/// `epsilon` of the squared Frobenius norm.
pub fn truncated_svd(w: &Matrix, epsilon: f64) -> Result<TruncatedSvd> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "explained-variance threshold must lie in [0, 1], got {epsilon}"
        )));
    }
    if w.data().iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroInput);
    }
    let svd = svd(w)?;
    let k = explained_variance_rank(&svd.singular_values, epsilon);
    let left = Matrix::from_fn(w.rows(), k, |i, j| svd.u.get(i, j) * svd.singular_values[j]);
    let right = Matrix::from_fn(k, w.cols(), |i, j| svd.v.get(j, i));
    counters::record((w.rows() * k) as u64, 0);
    Ok(TruncatedSvd {
        left,
        right,
        rank: k,
        singular_values: svd.singular_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gram_error(q: &Matrix) -> f64 {
        q.tmatmul(q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn orthonormal_input_keeps_its_span() {
        let q = orthogonalize(&Matrix::random_normal(6, 3, &mut rng(1)));
        let out = orthogonalize(&q);
        for j in 0..3 {
            let d = dot(&out.column(j), &q.column(j)).abs();
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_full_rank_is_orthonormal() {
        let out = orthogonalize(&Matrix::random_normal(8, 3, &mut rng(2)));
        assert!(gram_error(&out) <= 1e-12);
    }

    #[test]
    fn duplicated_column_is_replaced() {
        let base = Matrix::random_normal(8, 2, &mut rng(3));
        let m = Matrix::from_fn(8, 3, |i, j| base.get(i, j.min(1)));
        let out = orthogonalize(&m);
        assert!(gram_error(&out) <= 1e-10);
        assert!(out.is_finite());
        // deterministic
        assert_eq!(out, orthogonalize(&m));
    }

    #[test]
    fn zero_matrix_still_yields_orthonormal_columns() {
        let out = orthogonalize(&Matrix::zeros(5, 3));
        assert!(gram_error(&out) <= 1e-10);
    }

    #[test]
    fn diagonal_rank_selection() {
        let w = Matrix::diag(&[3.0, 4.0]);
        let t = truncated_svd(&w, 0.6).unwrap();
        assert_eq!(t.rank, 1);
        assert!((t.singular_values[0] - 4.0).abs() < 1e-12);
        assert!((t.singular_values[1] - 3.0).abs() < 1e-12);
        assert_eq!(truncated_svd(&w, 0.7).unwrap().rank, 2);
    }

    #[test]
    fn exact_variance_boundary_counts() {
        // σ² = {0.64, 0.36}; ε = 0.64 is met exactly by K = 1.
        assert_eq!(explained_variance_rank(&[4.0, 3.0], 0.64), 1);
        assert_eq!(explained_variance_rank(&[4.0, 3.0], 0.0), 1);
        assert_eq!(explained_variance_rank(&[4.0, 3.0], 1.0), 2);
        assert_eq!(explained_variance_rank(&[4.0, 0.0], 1.0), 1);
    }

    #[test]
    fn rank_one_matrix() {
        let u = Matrix::random_normal(5, 1, &mut rng(4));
        let v = Matrix::random_normal(1, 7, &mut rng(5));
        let w = u.matmul(&v).unwrap();
        for eps in [0.1, 0.5, 1.0] {
            let t = truncated_svd(&w, eps).unwrap();
            assert_eq!(t.rank, 1);
            let rec = t.left.matmul(&t.right).unwrap();
            assert!(rec.max_abs_diff(&w) <= 1e-10);
        }
    }

    #[test]
    fn full_threshold_reproduces_input() {
        for (r, c) in [(6, 4), (4, 6), (5, 5)] {
            let w = Matrix::random_normal(r, c, &mut rng((r * 10 + c) as u64));
            let t = truncated_svd(&w, 1.0).unwrap();
            assert_eq!(t.rank, r.min(c));
            let rec = t.left.matmul(&t.right).unwrap();
            assert!(rec.relative_distance(&w) <= 1e-9);
        }
    }

    #[test]
    fn rejects_zero_and_bad_threshold() {
        assert!(matches!(truncated_svd(&Matrix::zeros(3, 3), 0.5), Err(Error::ZeroInput)));
        assert!(truncated_svd(&Matrix::identity(2), 1.5).is_err());
        assert!(truncated_svd(&Matrix::identity(2), -0.1).is_err());
    }

    #[test]
    fn svd_factors_are_orthonormal() {
        let w = Matrix::random_normal(9, 5, &mut rng(6));
        let s = svd(&w).unwrap();
        assert!(gram_error(&s.u) < 1e-12);
        assert!(gram_error(&s.v) < 1e-12);
        assert!(s.reconstruct().max_abs_diff(&w) < 1e-12);
        assert!(s.singular_values.windows(2).all(|p| p[0] >= p[1]));
    }

    proptest! {
        #[test]
        fn rank_monotone_in_threshold(seed in any::<u64>(), r in 2usize..8, c in 2usize..8) {
            let w = Matrix::random_normal(r, c, &mut rng(seed));
            let s = svd(&w).unwrap().singular_values;
            let mut last = 0;
            for step in 0..=20 {
                let k = explained_variance_rank(&s, step as f64 / 20.0);
                prop_assert!(k >= last);
                last = k;
            }
        }

        #[test]
        fn truncation_error_respects_threshold(seed in any::<u64>(), eps in 0.0f64..=1.0) {
            let w = Matrix::random_normal(7, 5, &mut rng(seed));
            let t = truncated_svd(&w, eps).unwrap();
            let rec = t.left.matmul(&t.right).unwrap();
            let err = w.distance(&rec).powi(2) / w.frobenius_norm_sq();
            prop_assert!(err <= 1.0 - eps + 1e-9);
        }

        #[test]
        fn orthogonalize_gram_is_identity(seed in any::<u64>(), a in 3usize..10, k in 1usize..4) {
            let out = orthogonalize(&Matrix::random_normal(a, k.min(a), &mut rng(seed)));
            prop_assert!(gram_error(&out) <= 1e-10);
        }
    }
}
