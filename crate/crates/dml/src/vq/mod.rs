//! Discrete mode codebook: nearest/assignment lookups, the two VQ loss
//! terms, and usage accounting.

mod hungarian;

pub use hungarian::{assignment_cost, hungarian_assign};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::normal_init;
use crate::scalar::Scalar;
use crate::tensor::{TensorBase, TensorError};

/// Standard deviation for codebook initialization. Deliberately wider than
/// the transformer init so fresh entries spread out around the tiny initial
/// caption embeddings.
pub const CODEBOOK_INIT_STD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum VqError {
    #[error("hungarian_assign: {n} rows exceed {k} columns; need n <= k")]
    TooManyRows { n: usize, k: usize },
    #[error("hungarian_assign: cost matrix is empty or ragged")]
    BadCosts,
    #[error("hungarian_assign: cost matrix contains a non-finite value")]
    NonFiniteCost,
    #[error("codebook: embedding width {got} does not match entry width {want}")]
    DimMismatch { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How caption embeddings are bound to codebook entries during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStrategy {
    /// Injective minimum-cost matching of a caption set into the codebook.
    Hungarian,
    /// Independent nearest-entry lookup per caption.
    Nearest,
}

/// Learned codebook of `k` mode vectors of width `d`.
#[derive(Debug, Clone)]
pub struct CodebookBase<S: Scalar> {
    pub entries: TensorBase<S>,
}

impl<S: Scalar> CodebookBase<S> {
    pub fn init(k: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            entries: normal_init(&[k, d], CODEBOOK_INIT_STD, rng),
        }
    }

    pub fn from_entries(entries: TensorBase<S>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.entries.shape()[1]
    }

    fn check_width(&self, e: &TensorBase<S>) -> Result<(usize, usize), VqError> {
        let (n, d) = e.expect_matrix("codebook lookup")?;
        if d != self.width() {
            return Err(VqError::DimMismatch {
                got: d,
                want: self.width(),
            });
        }
        Ok((n, d))
    }

    /// Euclidean distances between each embedding row and each entry.
    pub fn distance_matrix(&self, e: &TensorBase<S>) -> Result<Vec<Vec<S>>, VqError> {
        let (n, d) = self.check_width(e)?;
        let k = self.len();
        let ed = e.data();
        let cd = self.entries.data();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &ed[i * d..(i + 1) * d];
            let mut dists = Vec::with_capacity(k);
            for j in 0..k {
                let entry = &cd[j * d..(j + 1) * d];
                let sq: S = row
                    .iter()
                    .zip(entry)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                dists.push(sq.sqrt());
            }
            out.push(dists);
        }
        Ok(out)
    }

    /// Index of the closest entry per row; distance ties take the lowest
    /// index.
    pub fn nearest_lookup(&self, e: &TensorBase<S>) -> Result<Vec<usize>, VqError> {
        let dists = self.distance_matrix(e)?;
        Ok(dists
            .iter()
            .map(|row| {
                let mut best = 0usize;
                for (j, &dj) in row.iter().enumerate().skip(1) {
                    if dj < row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Bind a set of caption embeddings to entries under the given strategy.
    /// Hungarian assignment is injective within the set and requires
    /// `n <= k`; nearest lookup has no such restriction.
    pub fn assign(
        &self,
        e: &TensorBase<S>,
        strategy: AssignmentStrategy,
    ) -> Result<Vec<usize>, VqError> {
        match strategy {
            AssignmentStrategy::Nearest => self.nearest_lookup(e),
            AssignmentStrategy::Hungarian => {
                let costs = self.distance_matrix(e)?;
                hungarian_assign(&costs)
            }
        }
    }

    /// The two VQ loss terms plus the straight-through quantized output.
    ///
    /// Both losses are squared-error sums: the first pulls the selected
    /// entries toward the (frozen) embeddings, the second pulls the
    /// embeddings toward the (frozen) entries; the caller weights the second
    /// by beta. The returned `quantized` forwards the entry rows bit-exactly
    /// while passing downstream gradients to `e`.
    pub fn vq_losses(
        &self,
        e: &TensorBase<S>,
        assignment: &[usize],
    ) -> Result<VqTerms<S>, VqError> {
        self.check_width(e)?;
        let q = self.entries.gather_rows(assignment)?;
        let e_frozen = e.detach();
        let cb_diff = e_frozen.sub(&q)?;
        let codebook_loss = cb_diff.mul(&cb_diff)?.sum_all();
        let q_frozen = q.detach();
        let commit_diff = e.sub(&q_frozen)?;
        let commitment_loss = commit_diff.mul(&commit_diff)?.sum_all();
        let quantized = TensorBase::straight_through(e, &q)?;
        Ok(VqTerms {
            codebook_loss,
            commitment_loss,
            quantized,
        })
    }
}

/// Output of [`CodebookBase::vq_losses`].
#[derive(Debug, Clone)]
pub struct VqTerms<S: Scalar> {
    pub codebook_loss: TensorBase<S>,
    pub commitment_loss: TensorBase<S>,
    pub quantized: TensorBase<S>,
}

/// Cumulative per-entry usage counts over a training run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTracker {
    pub counts: Vec<u64>,
}

impl UsageTracker {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![0; k],
        }
    }

    pub fn record(&mut self, assignment: &[usize]) {
        for &ix in assignment {
            self.counts[ix] += 1;
        }
    }

    /// Entries used at least once so far ("effective modes").
    pub fn effective_modes(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn report(&self) -> UsageReport {
        let total: u64 = self.counts.iter().sum();
        UsageReport {
            counts: self.counts.clone(),
            total,
            effective_modes: self.effective_modes(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsageReport {
    pub counts: Vec<u64>,
    pub total: u64,
    pub effective_modes: usize,
}
