//! Reverse pass: one walk over the recorded DAG in descending creation order.

use std::collections::HashSet;

use super::ops::{gelu_derivative, matmul_nt_raw, matmul_raw, matmul_tn_raw};
use super::{OpKind, OpRecord, TensorBase, TensorError};
use crate::scalar::{s, Scalar};

impl<S: Scalar> TensorBase<S> {
    /// Accumulate `d loss / d t` into every tensor with `requires_grad` that
    /// is reachable from this scalar loss. Consumes the graph: a second
    /// backward through any of the same nodes is an error.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 || !self.shape().is_empty() {
            return Err(TensorError::BackwardNonScalar {
                shape: self.shape().to_vec(),
            });
        }
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<TensorBase<S>> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.op() {
                if op.consumed.get() {
                    return Err(TensorError::GraphConsumed);
                }
                for input in &op.inputs {
                    stack.push(input.clone());
                }
            }
            nodes.push(t);
        }
        if !self.requires_grad() {
            // No parameter feeds this value; there is nothing to populate.
            return Ok(());
        }
        // Creation ids order the DAG: every input predates its output.
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));
        for n in &nodes {
            if n.requires_grad() {
                n.ensure_zero_grad();
            }
        }
        self.accumulate_grad(&[S::one()]);
        for n in &nodes {
            let Some(op) = n.op() else { continue };
            op.consumed.set(true);
            propagate(n, op)?;
        }
        Ok(())
    }
}

fn propagate<S: Scalar>(node: &TensorBase<S>, op: &OpRecord<S>) -> Result<(), TensorError> {
    let g = node
        .grad()
        .expect("op output grad initialized before propagation");
    let ins = &op.inputs;
    match &op.kind {
        OpKind::Add => {
            if ins[0].requires_grad() {
                ins[0].accumulate_grad(&g);
            }
            if ins[1].requires_grad() {
                ins[1].accumulate_grad(&g);
            }
        }
        OpKind::Sub => {
            if ins[0].requires_grad() {
                ins[0].accumulate_grad(&g);
            }
            if ins[1].requires_grad() {
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                ins[1].accumulate_grad(&neg);
            }
        }
        OpKind::Mul => {
            if ins[0].requires_grad() {
                let d: Vec<S> = g
                    .iter()
                    .zip(ins[1].data().iter())
                    .map(|(&gv, &b)| gv * b)
                    .collect();
                ins[0].accumulate_grad(&d);
            }
            if ins[1].requires_grad() {
                let d: Vec<S> = g
                    .iter()
                    .zip(ins[0].data().iter())
                    .map(|(&gv, &a)| gv * a)
                    .collect();
                ins[1].accumulate_grad(&d);
            }
        }
        OpKind::AddScalar => {
            if ins[0].requires_grad() {
                ins[0].accumulate_grad(&g);
            }
        }
        OpKind::MulScalar(c) => {
            if ins[0].requires_grad() {
                let d: Vec<S> = g.iter().map(|&v| v * *c).collect();
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::AddRow => {
            if ins[0].requires_grad() {
                ins[0].accumulate_grad(&g);
            }
            if ins[1].requires_grad() {
                let cols = ins[0].last_dim();
                let rows = ins[0].view_rows();
                let mut d = vec![S::zero(); cols];
                for i in 0..rows {
                    for (dj, &gv) in d.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                        *dj += gv;
                    }
                }
                ins[1].accumulate_grad(&d);
            }
        }
        OpKind::MatMul => {
            let (m, p) = (ins[0].shape()[0], ins[0].shape()[1]);
            let q = ins[1].shape()[1];
            if ins[0].requires_grad() {
                let d = matmul_nt_raw(&g, &ins[1].data(), m, q, p);
                ins[0].accumulate_grad(&d);
            }
            if ins[1].requires_grad() {
                let d = matmul_tn_raw(&ins[0].data(), &g, m, p, q);
                ins[1].accumulate_grad(&d);
            }
        }
        OpKind::MatMulNT => {
            let (m, p) = (ins[0].shape()[0], ins[0].shape()[1]);
            let q = ins[1].shape()[0];
            if ins[0].requires_grad() {
                let d = matmul_raw(&g, &ins[1].data(), m, q, p);
                ins[0].accumulate_grad(&d);
            }
            if ins[1].requires_grad() {
                let d = matmul_tn_raw(&g, &ins[0].data(), m, q, p);
                ins[1].accumulate_grad(&d);
            }
        }
        OpKind::Transpose => {
            if ins[0].requires_grad() {
                let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
                let mut d = vec![S::zero(); r * c];
                for i in 0..c {
                    for j in 0..r {
                        d[j * c + i] = g[i * r + j];
                    }
                }
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::GatherRows(indices) => {
            if ins[0].requires_grad() {
                let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
                let mut d = vec![S::zero(); r * c];
                for (i, &ix) in indices.iter().enumerate() {
                    for (dj, &gv) in d[ix * c..(ix + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c])
                    {
                        *dj += gv;
                    }
                }
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::SliceCols { start, len } => {
            if ins[0].requires_grad() {
                let (r, c) = (ins[0].shape()[0], ins[0].shape()[1]);
                let mut d = vec![S::zero(); r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::ConcatCols => {
            let rows = ins[0].shape()[0];
            let total: usize = ins.iter().map(|t| t.shape()[1]).sum();
            let mut offset = 0usize;
            for input in ins {
                let w = input.shape()[1];
                if input.requires_grad() {
                    let mut d = vec![S::zero(); rows * w];
                    for i in 0..rows {
                        d[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    input.accumulate_grad(&d);
                }
                offset += w;
            }
        }
        OpKind::ConcatRows => {
            let mut offset = 0usize;
            for input in ins {
                let n = input.numel();
                if input.requires_grad() {
                    input.accumulate_grad(&g[offset..offset + n]);
                }
                offset += n;
            }
        }
        OpKind::SumAll => {
            if ins[0].requires_grad() {
                let d = vec![g[0]; ins[0].numel()];
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::SoftmaxLast | OpKind::MaskedSoftmax => {
            if ins[0].requires_grad() {
                let y = node.data();
                let rows = node.view_rows();
                let cols = node.last_dim();
                let mut d = vec![S::zero(); y.len()];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..cols {
                        d[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                drop(y);
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::LayerNorm { eps } => {
            let x = ins[0].data();
            let gain = ins[1].data();
            let rows = ins[0].view_rows();
            let cols = ins[0].last_dim();
            let inv_n = S::one() / s::<S>(cols as f64);
            let mut dx = vec![S::zero(); x.len()];
            let mut dgain = vec![S::zero(); cols];
            let mut dbias = vec![S::zero(); cols];
            let mut xhat = vec![S::zero(); cols];
            let mut dxhat = vec![S::zero(); cols];
            for i in 0..rows {
                let row = &x[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let mean = row.iter().copied().sum::<S>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
                let inv_std = S::one() / (var + *eps).sqrt();
                for j in 0..cols {
                    xhat[j] = (row[j] - mean) * inv_std;
                    dxhat[j] = gr[j] * gain[j];
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
                let m1 = dxhat.iter().copied().sum::<S>() * inv_n;
                let m2 = dxhat
                    .iter()
                    .zip(&xhat)
                    .map(|(&a, &b)| a * b)
                    .sum::<S>()
                    * inv_n;
                for j in 0..cols {
                    dx[i * cols + j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            drop((x, gain));
            if ins[0].requires_grad() {
                ins[0].accumulate_grad(&dx);
            }
            if ins[1].requires_grad() {
                ins[1].accumulate_grad(&dgain);
            }
            if ins[2].requires_grad() {
                ins[2].accumulate_grad(&dbias);
            }
        }
        OpKind::Gelu => {
            if ins[0].requires_grad() {
                let d: Vec<S> = ins[0]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&x, &gv)| gv * gelu_derivative(x))
                    .collect();
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::Dropout { mask, keep_scale } => {
            if ins[0].requires_grad() {
                let d: Vec<S> = g
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &keep)| if keep { gv * *keep_scale } else { S::zero() })
                    .collect();
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::CrossEntropySmoothed {
            targets,
            smoothing,
            ignore_id,
            kept,
        } => {
            if ins[0].requires_grad() {
                let logits = ins[0].data();
                let v = ins[0].shape()[1];
                let uniform = *smoothing / s::<S>(v as f64);
                let confident = S::one() - *smoothing;
                let scale = g[0] / s::<S>(*kept as f64);
                let mut d = vec![S::zero(); logits.len()];
                for (i, &y) in targets.iter().enumerate() {
                    if *ignore_id == Some(y) {
                        continue;
                    }
                    let row = &logits[i * v..(i + 1) * v];
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut denom = S::zero();
                    for &xv in row {
                        denom += (xv - max).exp();
                    }
                    for j in 0..v {
                        let p = (row[j] - max).exp() / denom;
                        let q = uniform + if j == y { confident } else { S::zero() };
                        d[i * v + j] = (p - q) * scale;
                    }
                }
                drop(logits);
                ins[0].accumulate_grad(&d);
            }
        }
        OpKind::StraightThrough => {
            // Gradient routes to e (input 0) unchanged; q (input 1) gets none.
            if ins[0].requires_grad() {
                ins[0].accumulate_grad(&g);
            }
        }
    }
    Ok(())
}
