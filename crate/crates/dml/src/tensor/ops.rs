//! Forward implementations. Each op validates shapes, computes the output
//! buffer, and records a graph node when any input requires gradients.

use rand::Rng;

use super::{BoolMat, OpKind, TensorBase, TensorError};
use crate::scalar::{s, Scalar};

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, p: usize, q: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * q];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * q..(l + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x p) * b^T (p x q)` where `b` is stored as `q x p`.
pub(crate) fn matmul_nt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, p: usize, q: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * q];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * q + j] = acc;
        }
    }
    out
}

/// `a^T (p x m) * b (m x q)` where `a` is stored as `m x p`.
pub(crate) fn matmul_tn_raw<S: Scalar>(a: &[S], b: &[S], m: usize, p: usize, q: usize) -> Vec<S> {
    let mut out = vec![S::zero(); p * q];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let brow = &b[i * q..(i + 1) * q];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * q..(l + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn check_same_shape<S: Scalar>(
    op: &'static str,
    a: &TensorBase<S>,
    b: &TensorBase<S>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<(), TensorError> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::Numeric {
            op,
            detail: "input contains a non-finite value".into(),
        });
    }
    Ok(())
}

pub(crate) fn gelu_value<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c: S = s(0.7978845608028654); // sqrt(2/pi)
    let k: S = s(0.044715);
    let u = c * (x + k * x * x * x);
    s::<S>(0.5) * x * (S::one() + u.tanh())
}

pub(crate) fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c: S = s(0.7978845608028654);
    let k: S = s(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    let du = c * (S::one() + s::<S>(3.0) * k * x * x);
    s::<S>(0.5) * (S::one() + t) + s::<S>(0.5) * x * sech2 * du
}

/// Numerically stable softmax of one row into `out`; positions where
/// `visible` is false (when given) are exactly zero.
fn softmax_row<S: Scalar>(row: &[S], visible: Option<&[bool]>, out: &mut [S]) {
    let mut max = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if visible.map_or(true, |m| m[j]) && v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (j, &v) in row.iter().enumerate() {
        if visible.map_or(true, |m| m[j]) {
            let e = (v - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = S::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

impl<S: Scalar> TensorBase<S> {
    pub fn add(&self, rhs: &Self) -> Result<Self, TensorError> {
        check_same_shape("add", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self::record(
            OpKind::Add,
            vec![self.clone(), rhs.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, TensorError> {
        check_same_shape("sub", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self::record(
            OpKind::Sub,
            vec![self.clone(), rhs.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self, TensorError> {
        check_same_shape("mul", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Self::record(
            OpKind::Mul,
            vec![self.clone(), rhs.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    pub fn add_scalar(&self, c: S) -> Self {
        let data = self.data().iter().map(|&a| a + c).collect();
        Self::record(
            OpKind::AddScalar,
            vec![self.clone()],
            data,
            self.shape().to_vec(),
        )
    }

    pub fn mul_scalar(&self, c: S) -> Self {
        let data = self.data().iter().map(|&a| a * c).collect();
        Self::record(
            OpKind::MulScalar(c),
            vec![self.clone()],
            data,
            self.shape().to_vec(),
        )
    }

    /// Broadcast-add a row vector over every row of a matrix.
    pub fn add_row(&self, row: &Self) -> Result<Self, TensorError> {
        let cols = self.last_dim();
        if row.numel() != cols || row.shape().len() > 2 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let rows = self.view_rows();
        let rd = row.data();
        let mut data = self.to_vec();
        for i in 0..rows {
            for (v, &r) in data[i * cols..(i + 1) * cols].iter_mut().zip(rd.iter()) {
                *v += r;
            }
        }
        drop(rd);
        Ok(Self::record(
            OpKind::AddRow,
            vec![self.clone(), row.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        let (m, p) = self.expect_matrix("matmul")?;
        let (p2, q) = rhs.expect_matrix("matmul")?;
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = matmul_raw(&self.data(), &rhs.data(), m, p, q);
        Ok(Self::record(
            OpKind::MatMul,
            vec![self.clone(), rhs.clone()],
            data,
            vec![m, q],
        ))
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self, TensorError> {
        let (m, p) = self.expect_matrix("matmul_nt")?;
        let (q, p2) = rhs.expect_matrix("matmul_nt")?;
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = matmul_nt_raw(&self.data(), &rhs.data(), m, p, q);
        Ok(Self::record(
            OpKind::MatMulNT,
            vec![self.clone(), rhs.clone()],
            data,
            vec![m, q],
        ))
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        let (r, c) = self.expect_matrix("transpose")?;
        let src = self.data();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Self::record(
            OpKind::Transpose,
            vec![self.clone()],
            data,
            vec![c, r],
        ))
    }

    /// Row lookup with duplicate indices allowed; gradients scatter-add.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self, TensorError> {
        let (r, c) = self.expect_matrix("gather_rows")?;
        for &ix in indices {
            if ix >= r {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: ix,
                    size: r,
                });
            }
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            data.extend_from_slice(&src[ix * c..(ix + 1) * c]);
        }
        drop(src);
        Ok(Self::record(
            OpKind::GatherRows(indices.to_vec()),
            vec![self.clone()],
            data,
            vec![indices.len(), c],
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self, TensorError> {
        let (r, c) = self.expect_matrix("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                size: c,
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        drop(src);
        Ok(Self::record(
            OpKind::SliceCols { start, len },
            vec![self.clone()],
            data,
            vec![r, len],
        ))
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat_cols",
                expected: "at least one part",
                shape: vec![],
            });
        }
        let (rows, _) = parts[0].expect_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.expect_matrix("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                let src = p.data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Ok(Self::record(
            OpKind::ConcatCols,
            parts.iter().map(|&p| p.clone()).collect(),
            data,
            vec![rows, total],
        ))
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat_rows",
                expected: "at least one part",
                shape: vec![],
            });
        }
        let (_, cols) = parts[0].expect_matrix("concat_rows")?;
        let mut total = 0usize;
        for p in parts {
            let (r, c) = p.expect_matrix("concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * cols);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        Ok(Self::record(
            OpKind::ConcatRows,
            parts.iter().map(|&p| p.clone()).collect(),
            data,
            vec![total, cols],
        ))
    }

    pub fn sum_all(&self) -> Self {
        let total: S = self.data().iter().copied().sum();
        Self::record(OpKind::SumAll, vec![self.clone()], vec![total], Vec::new())
    }

    pub fn mean_all(&self) -> Self {
        let n = self.numel();
        self.sum_all().mul_scalar(S::one() / s::<S>(n as f64))
    }

    /// Softmax over the given axis. Rank-1 and rank-2 tensors are supported;
    /// for rank-2 the axis may be 0 or 1.
    pub fn softmax(&self, axis: usize) -> Result<Self, TensorError> {
        match (self.shape().len(), axis) {
            (1, 0) | (2, 1) => self.softmax_last(),
            (2, 0) => Ok(self.transpose()?.softmax_last()?.transpose()?),
            _ => Err(TensorError::BadShape {
                op: "softmax",
                expected: "axis 0 or 1 on a rank-1 or rank-2 tensor",
                shape: self.shape().to_vec(),
            }),
        }
    }

    fn softmax_last(&self) -> Result<Self, TensorError> {
        let src = self.data();
        check_finite("softmax", &src)?;
        let rows = self.view_rows();
        let cols = self.last_dim();
        if cols == 0 {
            return Err(TensorError::BadShape {
                op: "softmax",
                expected: "a non-empty last axis",
                shape: self.shape().to_vec(),
            });
        }
        let mut data = vec![S::zero(); src.len()];
        for i in 0..rows {
            softmax_row(
                &src[i * cols..(i + 1) * cols],
                None,
                &mut data[i * cols..(i + 1) * cols],
            );
        }
        drop(src);
        Ok(Self::record(
            OpKind::SoftmaxLast,
            vec![self.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    /// Row-wise softmax where hidden positions get weight exactly 0.0.
    /// A row with every position hidden is a numeric error.
    pub fn masked_softmax(&self, mask: &BoolMat) -> Result<Self, TensorError> {
        let (r, c) = self.expect_matrix("masked_softmax")?;
        if mask.rows() != r || mask.cols() != c {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: vec![r, c],
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        let src = self.data();
        check_finite("masked_softmax", &src)?;
        let mut data = vec![S::zero(); src.len()];
        for i in 0..r {
            let vis = &mask.as_slice()[i * c..(i + 1) * c];
            if !vis.iter().any(|&v| v) {
                return Err(TensorError::Numeric {
                    op: "masked_softmax",
                    detail: format!("row {i} has every position masked"),
                });
            }
            softmax_row(&src[i * c..(i + 1) * c], Some(vis), &mut data[i * c..(i + 1) * c]);
        }
        drop(src);
        Ok(Self::record(
            OpKind::MaskedSoftmax,
            vec![self.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// Uses population variance; `eps` sits inside the square root.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: S) -> Result<Self, TensorError> {
        let cols = self.last_dim();
        if self.shape().is_empty() || cols == 0 {
            return Err(TensorError::BadShape {
                op: "layer_norm",
                expected: "a rank-1 or rank-2 tensor with a non-empty last axis",
                shape: self.shape().to_vec(),
            });
        }
        if gain.numel() != cols || bias.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.view_rows();
        let src = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut data = vec![S::zero(); src.len()];
        let inv_n = S::one() / s::<S>(cols as f64);
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<S>()
                * inv_n;
            let inv_std = S::one() / (var + eps).sqrt();
            for j in 0..cols {
                data[i * cols + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        drop((src, g, b));
        Ok(Self::record(
            OpKind::LayerNorm { eps },
            vec![self.clone(), gain.clone(), bias.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&self) -> Self {
        let data = self.data().iter().map(|&x| gelu_value(x)).collect();
        Self::record(OpKind::Gelu, vec![self.clone()], data, self.shape().to_vec())
    }

    /// Inverted dropout: kept activations are scaled by `1/(1-p)` so the
    /// expectation is unchanged. `p == 0` is an exact identity.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Result<Self, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Numeric {
                op: "dropout",
                detail: format!("rate {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = s::<S>(1.0 / (1.0 - p));
        let mask: Vec<bool> = (0..self.numel()).map(|_| rng.gen::<f64>() >= p).collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &keep)| if keep { x * keep_scale } else { S::zero() })
            .collect();
        Ok(Self::record(
            OpKind::Dropout { mask, keep_scale },
            vec![self.clone()],
            data,
            self.shape().to_vec(),
        ))
    }

    /// Label-smoothed cross entropy between `self` (logits, `[t, V]`) and
    /// integer targets, averaged over rows whose target is not `ignore_id`.
    pub fn cross_entropy_smoothed(
        &self,
        targets: &[usize],
        smoothing: f64,
        ignore_id: Option<usize>,
    ) -> Result<Self, TensorError> {
        let (t, v) = self.expect_matrix("cross_entropy_smoothed")?;
        if targets.len() != t {
            return Err(TensorError::LengthMismatch {
                op: "cross_entropy_smoothed",
                len: targets.len(),
                shape: vec![t, v],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Numeric {
                op: "cross_entropy_smoothed",
                detail: format!("smoothing {smoothing} outside [0, 1)"),
            });
        }
        let src = self.data();
        check_finite("cross_entropy_smoothed", &src)?;
        let eps: S = s(smoothing);
        let uniform = eps / s::<S>(v as f64);
        let confident = S::one() - eps;
        let mut total = S::zero();
        let mut kept = 0usize;
        for (i, &y) in targets.iter().enumerate() {
            if ignore_id == Some(y) {
                continue;
            }
            if y >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy_smoothed",
                    index: y,
                    size: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max
                + row
                    .iter()
                    .map(|&x| (x - max).exp())
                    .sum::<S>()
                    .ln();
            let row_sum: S = row.iter().copied().sum();
            total += lse - confident * row[y] - uniform * row_sum;
            kept += 1;
        }
        if kept == 0 {
            return Err(TensorError::Numeric {
                op: "cross_entropy_smoothed",
                detail: "every target position is ignored".into(),
            });
        }
        drop(src);
        let loss = total / s::<S>(kept as f64);
        Ok(Self::record(
            OpKind::CrossEntropySmoothed {
                targets: targets.to_vec(),
                smoothing: eps,
                ignore_id,
                kept,
            },
            vec![self.clone()],
            vec![loss],
            Vec::new(),
        ))
    }

    /// Straight-through estimator: the forward value is a bit-for-bit copy of
    /// `q`, the gradient flows unchanged into `e`, and `q` receives none.
    pub fn straight_through(e: &Self, q: &Self) -> Result<Self, TensorError> {
        check_same_shape("straight_through", e, q)?;
        Ok(Self::record(
            OpKind::StraightThrough,
            vec![e.clone(), q.clone()],
            q.to_vec(),
            q.shape().to_vec(),
        ))
    }

    /// Constant view of the same values, disconnected from the graph.
    pub fn detach(&self) -> Self {
        Self::construct(self.to_vec(), self.shape().to_vec(), false, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T = TensorBase<f64>;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn elementwise_and_scalar_ops() {
        let a = T::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = T::from_vec(vec![0.5, 0.5, 0.5, 0.5], &[2, 2]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![1.5, 2.5, 3.5, 4.5]);
        assert_eq!(a.sub(&b).unwrap().to_vec(), vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(a.mul(&b).unwrap().to_vec(), vec![0.5, 1.0, 1.5, 2.0]);
        assert_eq!(a.add_scalar(1.0).to_vec(), vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(a.mul_scalar(2.0).to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
        assert!(a
            .add(&T::zeros(&[3]))
            .unwrap_err()
            .to_string()
            .contains("shape mismatch"));
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = T::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = T::from_vec(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_equals_matmul_with_transpose() {
        let a = T::from_vec((0..6).map(|i| i as f64).collect(), &[2, 3]).unwrap();
        let b = T::from_vec((0..12).map(|i| (i as f64).sin()).collect(), &[4, 3]).unwrap();
        let via_nt = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(via_nt.to_vec(), via_t.to_vec());
    }

    #[test]
    fn gather_slice_concat_round_trip() {
        let t = T::from_vec((0..12).map(|i| i as f64).collect(), &[3, 4]).unwrap();
        let g = t.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.to_vec(), vec![8.0, 9.0, 10.0, 11.0, 0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
        let left = t.slice_cols(0, 2).unwrap();
        let right = t.slice_cols(2, 2).unwrap();
        let back = T::concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back.to_vec(), t.to_vec());
        assert!(t.gather_rows(&[3]).is_err());
        assert!(t.slice_cols(3, 2).is_err());
    }

    #[test]
    fn concat_rows_stacks_and_validates() {
        let a = T::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = T::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let s = T::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = T::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        assert!(T::concat_rows(&[&a, &bad]).is_err());
        assert!(T::concat_rows(&[]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_golden() {
        let x = T::from_vec(vec![0.0, 2.0f64.ln()], &[1, 2]).unwrap();
        let y = x.softmax(1).unwrap();
        assert!(close(y.to_vec()[0], 1.0 / 3.0, 1e-15));
        assert!(close(y.to_vec()[1], 2.0 / 3.0, 1e-15));

        let big = T::from_vec(vec![1000.0, 1000.0, 1000.0], &[3]).unwrap();
        let yb = big.softmax(0).unwrap();
        for v in yb.to_vec() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }

        let col = T::from_vec(vec![0.0, 0.0, 1.0, 0.0], &[2, 2]).unwrap();
        let yc = col.softmax(0).unwrap();
        let d = yc.to_vec();
        assert!(close(d[0] + d[2], 1.0, 1e-15));
        assert!(close(d[1] + d[3], 1.0, 1e-15));
        assert!(d[2] > d[0]);

        let nan = T::from_vec(vec![f64::NAN, 0.0], &[2]).unwrap();
        assert!(matches!(nan.softmax(0), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn masked_softmax_zeroes_hidden_positions() {
        let x = T::from_vec(vec![5.0, 1.0, 3.0, 2.0, 2.0, 2.0], &[2, 3]).unwrap();
        let mask = BoolMat::new(2, 3, vec![true, false, true, true, true, true]).unwrap();
        let y = x.masked_softmax(&mask).unwrap();
        let d = y.to_vec();
        assert_eq!(d[1], 0.0);
        assert!(close(d[0] + d[2], 1.0, 1e-15));
        let all_hidden = BoolMat::new(1, 2, vec![false, false]).unwrap();
        let x2 = T::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        assert!(matches!(
            x2.masked_softmax(&all_hidden),
            Err(TensorError::Numeric { .. })
        ));
    }

    #[test]
    fn layer_norm_golden_values() {
        let g = T::from_vec(vec![1.0, 1.0], &[2]).unwrap();
        let b = T::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let x = T::from_vec(vec![1.0, -1.0], &[1, 2]).unwrap();
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!(close(y.to_vec()[0], expect, 1e-15));
        assert!(close(y.to_vec()[1], -expect, 1e-15));

        let xc = T::from_vec(vec![3.0, 3.0, 3.0], &[1, 3]).unwrap();
        let g3 = T::from_vec(vec![1.0; 3], &[3]).unwrap();
        let b3 = T::from_vec(vec![0.0; 3], &[3]).unwrap();
        let yc = xc.layer_norm(&g3, &b3, 1e-5).unwrap();
        for v in yc.to_vec() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gelu_limits() {
        let x = T::from_vec(vec![0.0, 1000.0, -1000.0], &[3]).unwrap();
        let y = x.gelu().to_vec();
        assert_eq!(y[0], 0.0);
        assert!(close(y[1], 1000.0, 1e-9));
        assert!(close(y[2], 0.0, 1e-9));
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = T::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(y.id(), x.id());
        let z = x.dropout(0.5, &mut rng).unwrap();
        for (a, b) in x.to_vec().iter().zip(z.to_vec()) {
            assert!(b == 0.0 || close(b, a * 2.0, 1e-15));
        }
    }

    #[test]
    fn cross_entropy_golden_values() {
        // Uniform logits over V=4: loss is ln(4) for any smoothing.
        let logits = T::from_vec(vec![0.25; 4], &[1, 4]).unwrap();
        let l0 = logits.cross_entropy_smoothed(&[2], 0.0, None).unwrap();
        assert!(close(l0.item(), 4.0f64.ln(), 1e-12));
        let l1 = logits.cross_entropy_smoothed(&[2], 0.1, None).unwrap();
        assert!(close(l1.item(), 4.0f64.ln(), 1e-12));

        // Peaked logits, smoothing 0: plain negative log likelihood.
        let peaked = T::from_vec(vec![10.0, 0.0, 0.0, 0.0], &[1, 4]).unwrap();
        let nll = peaked.cross_entropy_smoothed(&[0], 0.0, None).unwrap();
        let p0 = 10.0f64.exp() / (10.0f64.exp() + 3.0);
        assert!(close(nll.item(), -p0.ln(), 1e-12));

        // Ignored rows drop out of the average.
        let two = T::from_vec(vec![0.25, 0.25, 0.25, 0.25, 10.0, 0.0, 0.0, 0.0], &[2, 4]).unwrap();
        let l = two.cross_entropy_smoothed(&[2, 3], 0.0, Some(3)).unwrap();
        assert!(close(l.item(), 4.0f64.ln(), 1e-12));
        assert!(matches!(
            two.cross_entropy_smoothed(&[3, 3], 0.0, Some(3)),
            Err(TensorError::Numeric { .. })
        ));
    }

    #[test]
    fn straight_through_forward_is_bitwise_q() {
        let e = T::param(vec![1.0, 2.0], &[2]).unwrap();
        let q = T::param(vec![0.1 + 0.2, -7.5], &[2]).unwrap();
        let st = T::straight_through(&e, &q).unwrap();
        for (a, b) in st.to_vec().iter().zip(q.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn detach_produces_grad_free_leaf() {
        let x = T::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.detach();
        assert!(!d.requires_grad());
        assert_eq!(d.to_vec(), x.to_vec());
        assert_ne!(d.id(), x.id());
    }
}
