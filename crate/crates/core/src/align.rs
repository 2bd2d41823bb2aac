//! Feature alignment through a truncated SVD of the raw node-feature matrix.
//!
//! Each dataset gets its own basis of top right singular vectors; projecting
//! onto it maps any raw width `d_raw` to the shared width `d_x`, zero-padding
//! when the matrix has fewer than `d_x` significant directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numerics::Tensor;

pub const DEFAULT_ALIGNED_DIM: usize = 128;

/// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("feature matrix contains non-finite entries")]
    NonFinite,
    #[error("feature matrix is empty ({0}x{1})")]
    Empty(usize, usize),
    #[error("target dimension must be positive")]
    ZeroTarget,
    #[error("feature width {found} differs from basis width {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Randomized subspace iteration settings.
#[derive(Clone, Copy, Debug)]
pub struct SubspaceIteration {
    pub oversample: usize,
    pub power_iters: usize,
    /// Further iterations allowed while the leading singular values still move.
    pub max_extra_iters: usize,
    pub tol: f64,
}

impl Default for SubspaceIteration {
    fn default() -> Self {
        Self { oversample: 8, power_iters: 4, max_extra_iters: 200, tol: 1e-14 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentBasis {
    /// `d_raw × d_eff`, orthonormal columns, each with its largest-magnitude entry positive.
    pub basis: Tensor,
    /// Descending, length `d_eff`.
    pub singulars: Vec<f64>,
    pub d_x_target: usize,
}

impl AlignmentBasis {
    pub fn d_raw(&self) -> usize {
        self.basis.rows()
    }

    pub fn d_eff(&self) -> usize {
        self.singulars.len()
    }
}

pub fn fit_alignment(x: &Tensor, d_x_target: usize, seed: u64) -> Result<AlignmentBasis, AlignError> {
    fit_alignment_with(x, d_x_target, seed, SubspaceIteration::default())
}

pub fn fit_alignment_with(
    x: &Tensor,
    d_x_target: usize,
    seed: u64,
    opts: SubspaceIteration,
) -> Result<AlignmentBasis, AlignError> {
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(AlignError::Empty(n, d));
    }
    if d_x_target == 0 {
        return Err(AlignError::ZeroTarget);
    }
    if !x.is_finite() {
        return Err(AlignError::NonFinite);
    }
    let k = d_x_target.min(n).min(d);
    let width = (k + opts.oversample).min(n).min(d);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Tensor::from_vec(d, width, (0..d * width).map(|_| StandardNormal.sample(&mut rng)).collect())
        .expect("sized");

    let mut q = orthonormalize(&x.matmul(&omega).expect("shapes agree"));
    for _ in 0..opts.power_iters {
        q = power_step(x, &q);
    }
    let (mut sing, mut vecs) = rayleigh_ritz(x, &q);
    if width < d && width < n {
        for _ in 0..opts.max_extra_iters {
            q = power_step(x, &q);
            let (s2, v2) = rayleigh_ritz(x, &q);
            let moved = s2
                .iter()
                .zip(&sing)
                .take(k)
                .map(|(a, b)| (a - b).abs() / a.abs().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max);
            sing = s2;
            vecs = v2;
            if moved <= opts.tol {
                break;
            }
        }
    }

    let top = sing.first().copied().unwrap_or(0.0);
    let d_eff = sing.iter().take(k).filter(|&&s| top > 0.0 && s > RANK_TOL * top).count();
    let mut basis = Tensor::zeros(d, d_eff);
    for c in 0..d_eff {
        let col: Vec<f64> = (0..d).map(|r| vecs.get(r, c)).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in col.iter().enumerate() {
            basis.set(r, c, sign * v);
        }
    }
    Ok(AlignmentBasis { basis, singulars: sing[..d_eff].to_vec(), d_x_target })
}

/// `X · basis`, zero-padded on the right to `d_x_target` columns.
pub fn align(x: &Tensor, basis: &AlignmentBasis) -> Result<Tensor, AlignError> {
    if x.cols() != basis.d_raw() {
        return Err(AlignError::DimensionMismatch { expected: basis.d_raw(), found: x.cols() });
    }
    let projected = x.matmul(&basis.basis).expect("checked width");
    let mut out = Tensor::zeros(x.rows(), basis.d_x_target);
    let keep = basis.d_eff().min(basis.d_x_target);
    for r in 0..x.rows() {
        out.row_mut(r)[..keep].copy_from_slice(&projected.row(r)[..keep]);
    }
    Ok(out)
}

fn power_step(x: &Tensor, q: &Tensor) -> Tensor {
    let z = orthonormalize(&x.t_matmul(q).expect("shapes agree"));
    orthonormalize(&x.matmul(&z).expect("shapes agree"))
}

/// Singular values (descending) and right singular vectors (`d × width`) of `Qᵀ X`.
fn rayleigh_ritz(x: &Tensor, q: &Tensor) -> (Vec<f64>, Tensor) {
    // columns of Xᵀ Q are the rows of B = Qᵀ X
    let bt = x.t_matmul(q).expect("shapes agree");
    jacobi_svd_columns(&bt)
}

/// Modified Gram-Schmidt with one re-orthogonalisation pass. Columns that are
/// numerically dependent on earlier ones are zeroed.
fn orthonormalize(a: &Tensor) -> Tensor {
    let (n, m) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..m).map(|c| (0..n).map(|r| a.get(r, c)).collect()).collect();
    let scale = cols.iter().map(|c| norm(c)).fold(0.0, f64::max);
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..m {
        for _ in 0..2 {
            for &i in &kept {
                let proj = dot(&cols[i], &cols[j]);
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= proj * y;
                }
            }
        }
        let nv = norm(&cols[j]);
        if nv > 1e-12 * scale && nv > 0.0 {
            cols[j].iter_mut().for_each(|v| *v /= nv);
            kept.push(j);
        } else {
            cols[j].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut out = Tensor::zeros(n, m);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            out.set(r, c, *v);
        }
    }
    out
}

/// One-sided Jacobi on the columns of `m` (`d × w`). Returns the column norms
/// after orthogonalisation, sorted descending, and the matching unit columns.
/// For `m = Bᵀ` these are the singular values and right singular vectors of `B`.
fn jacobi_svd_columns(m: &Tensor) -> (Vec<f64>, Tensor) {
    let (d, w) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..w).map(|c| (0..d).map(|r| m.get(r, c)).collect()).collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..w {
            for q in (p + 1)..w {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = cols.split_at_mut(q);
                for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(i, c)| (norm(c), i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut vecs = Tensor::zeros(d, w);
    let mut sing = Vec::with_capacity(w);
    for (c, &(s, i)) in order.iter().enumerate() {
        sing.push(s);
        if s > 0.0 {
            for r in 0..d {
                vecs.set(r, c, cols[i][r] / s);
            }
        }
    }
    (sing, vecs)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(seed: u64, r: usize, c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dense_singulars(x: &Tensor) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
        let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    #[test]
    fn identity_has_unit_singulars() {
        let b = fit_alignment(&Tensor::identity(3), 2, 0).unwrap();
        assert_eq!(b.d_eff(), 2);
        for s in &b.singulars {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7];
        let x = Tensor::from_vec(4, 3, u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect()).unwrap();
        let b = fit_alignment(&x, 4, 9).unwrap();
        assert_eq!(b.d_eff(), 1);
        let expected = u.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((b.singulars[0] - expected).abs() < 1e-12 * expected);

        let out = align(&x, &AlignmentBasis { d_x_target: 3, ..b }).unwrap();
        assert_eq!(out.cols(), 3);
        for r in 0..4 {
            assert_eq!(out.get(r, 1), 0.0);
            assert_eq!(out.get(r, 2), 0.0);
        }
    }

    #[test]
    fn top_singulars_match_dense_oracle() {
        let x = random(4, 20, 10);
        let b = fit_alignment(&x, 5, 17).unwrap();
        let oracle = dense_singulars(&x);
        for (s, o) in b.singulars.iter().zip(&oracle) {
            assert!((s - o).abs() <= 1e-6 * o, "{s} vs {o}");
        }
    }

    #[test]
    fn basis_is_orthonormal_and_sign_canonical() {
        let x = random(8, 30, 12);
        let b = fit_alignment(&x, 6, 3).unwrap();
        let gram = b.basis.t_matmul(&b.basis).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - target).abs() < 1e-8);
            }
            let col: Vec<f64> = (0..12).map(|r| b.basis.get(r, i)).collect();
            let max = col.iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
            assert!(max > 0.0);
        }
        assert!(b.singulars.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn full_rank_alignment_preserves_distances() {
        let x = Tensor::identity(2);
        let b = fit_alignment(&x, 2, 1).unwrap();
        let y = align(&x, &b).unwrap();
        let dist = |t: &Tensor| ((t.get(0, 0) - t.get(1, 0)).powi(2) + (t.get(0, 1) - t.get(1, 1)).powi(2)).sqrt();
        assert!((dist(&x) - dist(&y)).abs() < 1e-12);
    }

    #[test]
    fn energy_capture_matches_oracle() {
        let x = random(21, 25, 14);
        let b = fit_alignment(&x, 6, 5).unwrap();
        let y = align(&x, &b).unwrap();
        let oracle = dense_singulars(&x);
        let expected: f64 = oracle.iter().take(6).map(|s| s * s).sum::<f64>().sqrt();
        assert!((y.frobenius_norm() - expected).abs() <= 1e-6 * expected);
    }

    #[test]
    fn row_permutation_permutes_output() {
        let x = random(2, 16, 9);
        let perm: Vec<usize> = (0..16).rev().collect();
        let xp = x.select_rows(&perm);
        let y = align(&x, &fit_alignment(&x, 4, 7).unwrap()).unwrap();
        let yp = align(&xp, &fit_alignment(&xp, 4, 7).unwrap()).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((yp.get(k, c) - y.get(p, c)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn errors() {
        let mut x = Tensor::identity(2);
        x.set(0, 0, f64::NAN);
        assert!(matches!(fit_alignment(&x, 2, 0), Err(AlignError::NonFinite)));
        let b = fit_alignment(&Tensor::identity(3), 2, 0).unwrap();
        assert!(matches!(align(&Tensor::identity(2), &b), Err(AlignError::DimensionMismatch { .. })));
    }

    #[test]
    fn deterministic_under_seed() {
        let x = random(12, 18, 11);
        assert_eq!(fit_alignment(&x, 4, 99).unwrap(), fit_alignment(&x, 4, 99).unwrap());
    }
}
