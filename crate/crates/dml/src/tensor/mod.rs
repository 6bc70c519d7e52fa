//! Reverse-mode autograd engine over flat row-major buffers.
//!
//! Tensors are cheap reference-counted handles. Operations on tensors that
//! require gradients record a node in an implicit DAG; [`TensorBase::backward`]
//! walks that DAG once in reverse creation order and accumulates gradients
//! into every reachable tensor with `requires_grad`. A graph is consumed by
//! backward and cannot be walked twice.

mod backward;
pub mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    BackwardNonScalar { shape: Vec<usize> },
    #[error("backward was already run through part of this graph")]
    GraphConsumed,
    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },
}

/// Dense boolean matrix used as an attention visibility mask.
/// `true` means the position is visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMat {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                op: "BoolMat::new",
                len: data.len(),
                shape: vec![rows, cols],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Lower-triangular causal mask: position i sees positions 0..=i.
    pub fn causal(t: usize) -> Self {
        Self::from_fn(t, t, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }
}

#[derive(Debug)]
pub(crate) enum OpKind<S: Scalar> {
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(S),
    /// inputs: [matrix, row]
    AddRow,
    MatMul,
    MatMulNT,
    Transpose,
    GatherRows(Vec<usize>),
    SliceCols {
        start: usize,
        len: usize,
    },
    ConcatCols,
    ConcatRows,
    SumAll,
    /// Softmax over the last axis; backward reads the saved output.
    SoftmaxLast,
    MaskedSoftmax,
    /// inputs: [x, gain, bias]
    LayerNorm {
        eps: S,
    },
    Gelu,
    Dropout {
        mask: Vec<bool>,
        keep_scale: S,
    },
    CrossEntropySmoothed {
        targets: Vec<usize>,
        smoothing: S,
        ignore_id: Option<usize>,
        kept: usize,
    },
    /// inputs: [e, q]; forward copies q bit-for-bit, backward routes to e only.
    StraightThrough,
}

pub(crate) struct OpRecord<S: Scalar> {
    pub(crate) kind: OpKind<S>,
    pub(crate) inputs: Vec<TensorBase<S>>,
    pub(crate) consumed: Cell<bool>,
}

pub(crate) struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    op: Option<OpRecord<S>>,
}

/// Handle to a node in the autograd graph. Cloning is shallow.
pub struct TensorBase<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for TensorBase<S> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for TensorBase<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> TensorBase<S> {
    fn construct(
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<OpRecord<S>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor that does not require gradients.
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::LengthMismatch {
                op: "from_vec",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::construct(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::LengthMismatch {
                op: "param",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::construct(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::construct(vec![S::zero(); numel], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self::construct(vec![value; numel], shape.to_vec(), false, None)
    }

    /// Rank-0 tensor (shape `[]`).
    pub fn scalar(value: S) -> Self {
        Self::construct(vec![value], Vec::new(), false, None)
    }

    pub(crate) fn record(
        kind: OpKind<S>,
        inputs: Vec<TensorBase<S>>,
        data: Vec<S>,
        shape: Vec<usize>,
    ) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let op = if requires_grad {
            Some(OpRecord {
                kind,
                inputs,
                consumed: Cell::new(false),
            })
        } else {
            None
        };
        Self::construct(data, shape, requires_grad, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// In-place mutation of the underlying buffer. Only meaningful on leaves:
    /// recorded graphs assume forward data is immutable.
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place mutation of the gradient buffer; no-op when absent.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [S])) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            f(g);
        }
    }

    pub(crate) fn ensure_zero_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![S::zero(); self.numel()]);
        }
    }

    pub(crate) fn accumulate_grad(&self, delta: &[S]) {
        self.ensure_zero_grad();
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.as_mut().expect("grad buffer just initialized");
        debug_assert_eq!(buf.len(), delta.len());
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += *d;
        }
    }

    pub(crate) fn op(&self) -> Option<&OpRecord<S>> {
        self.inner.op.as_ref()
    }

    /// Number of rows when viewed as a matrix (rank-1 counts as one row).
    pub(crate) fn view_rows(&self) -> usize {
        match self.inner.shape.len() {
            0 | 1 => 1,
            _ => self.inner.shape[..self.inner.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last axis (1 for rank-0).
    pub(crate) fn last_dim(&self) -> usize {
        self.inner.shape.last().copied().unwrap_or(1)
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::BadShape {
                op,
                expected: "a rank-2 tensor",
                shape: self.inner.shape.clone(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_are_checked() {
        let err = TensorBase::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
        let t = TensorBase::<f64>::from_vec(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = TensorBase::<f64>::scalar(4.25);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 4.25);
    }

    #[test]
    fn ids_increase_with_creation_order() {
        let a = TensorBase::<f64>::zeros(&[2]);
        let b = TensorBase::<f64>::zeros(&[2]);
        assert!(b.id() > a.id());
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = BoolMat::causal(3);
        assert!(m.at(0, 0) && !m.at(0, 1) && !m.at(0, 2));
        assert!(m.at(2, 0) && m.at(2, 1) && m.at(2, 2));
    }

    #[test]
    fn generic_core_works_at_f32() {
        let a = TensorBase::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = TensorBase::<f32>::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![4.0f32, 6.0]);
    }
}
