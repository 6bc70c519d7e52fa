//! Small dense symmetric eigenproblems and PCA projection.
//!
//! Everything here operates on plain `Vec` buffers: these routines run on
//! matrices no larger than a few dozen rows (pairwise-similarity kernels,
//! projection covariances), where a cyclic Jacobi sweep is plenty.

use crate::scalar::{s, Scalar};

/// Eigendecomposition of a symmetric `n x n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order with matching
/// eigenvectors (rows of the returned matrix, `vecs[k]` for `vals[k]`).
pub fn symmetric_eigen<S: Scalar>(matrix: &[S], n: usize) -> (Vec<S>, Vec<Vec<S>>) {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut a = matrix.to_vec();
    // v starts as identity; columns accumulate the rotations.
    let mut v = vec![S::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = S::one();
    }
    let tol: S = s(1e-14);
    for _sweep in 0..100 {
        let mut off = S::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (s::<S>(2.0) * apq);
                let t = {
                    let sign = if theta < S::zero() { -S::one() } else { S::one() };
                    sign / (theta.abs() + (theta * theta + S::one()).sqrt())
                };
                let c = S::one() / (t * t + S::one()).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals: Vec<S> = order.iter().map(|&i| a[i * n + i]).collect();
    let vecs: Vec<Vec<S>> = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (vals, vecs)
}

/// A fitted principal-component basis.
#[derive(Debug, Clone)]
pub struct Pca<S: Scalar> {
    pub mean: Vec<S>,
    /// `components[c]` is the c-th principal axis (length `dim`).
    pub components: Vec<Vec<S>>,
    pub explained: Vec<S>,
}

impl<S: Scalar> Pca<S> {
    /// Fit `n_components` axes to `rows` (each of length `dim`).
    /// The sign of each axis is fixed so its largest-magnitude coefficient is
    /// positive, making the projection deterministic.
    pub fn fit(rows: &[Vec<S>], dim: usize, n_components: usize) -> Self {
        assert!(!rows.is_empty(), "PCA needs at least one row");
        assert!(n_components <= dim);
        let n = rows.len();
        let inv_n = S::one() / s::<S>(n as f64);
        let mut mean = vec![S::zero(); dim];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        let mut cov = vec![S::zero(); dim * dim];
        for r in rows {
            for i in 0..dim {
                let di = r[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let x = cov[i * dim + j] * inv_n;
                cov[i * dim + j] = x;
                cov[j * dim + i] = x;
            }
        }
        let (vals, vecs) = symmetric_eigen(&cov, dim);
        let mut components = Vec::with_capacity(n_components);
        for mut axis in vecs.into_iter().take(n_components) {
            let lead = axis
                .iter()
                .copied()
                .enumerate()
                .max_by(|(_, a), (_, b)| {
                    a.abs()
                        .partial_cmp(&b.abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            if axis[lead] < S::zero() {
                for x in axis.iter_mut() {
                    *x = -*x;
                }
            }
            components.push(axis);
        }
        Pca {
            mean,
            components,
            explained: vals.into_iter().take(n_components).collect(),
        }
    }

    pub fn project(&self, row: &[S]) -> Vec<S> {
        self.components
            .iter()
            .map(|axis| {
                axis.iter()
                    .zip(row.iter().zip(&self.mean))
                    .map(|(&a, (&x, &m))| a * (x - m))
                    .sum()
            })
            .collect()
    }
}
