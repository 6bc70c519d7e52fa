//! Transformer building blocks: embeddings, multi-head attention, pre-norm
//! encoder/decoder stacks, and the tied output head.
//!
//! All forwards operate on rank-2 tensors `[t, d_model]` for a single
//! sequence; batching happens one sequence at a time in the trainer.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::scalar::{s, Scalar};
use crate::tensor::{BoolMat, TensorBase, TensorError};

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation for weight and embedding initialization.
pub const INIT_STD: f64 = 0.02;

/// Sample a parameter tensor from N(0, std^2).
pub fn normal_init<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> TensorBase<S> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let data: Vec<S> = (0..n).map(|_| s(dist.sample(rng))).collect();
    TensorBase::param(data, shape).expect("shape matches data")
}

fn zeros_param<S: Scalar>(shape: &[usize]) -> TensorBase<S> {
    TensorBase::param(vec![S::zero(); shape.iter().product()], shape).expect("zeros")
}

fn ones_param<S: Scalar>(shape: &[usize]) -> TensorBase<S> {
    TensorBase::param(vec![S::one(); shape.iter().product()], shape).expect("ones")
}

/// Sink for named parameters; ordering is the checkpoint ordering.
pub type ParamList<S> = Vec<(String, TensorBase<S>)>;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub dropout: f64,
}

/// Affine map `x W^T + b` with `w` stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub w: TensorBase<S>,
    pub b: TensorBase<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: normal_init(&[out_dim, in_dim], INIT_STD, rng),
            b: zeros_param(&[out_dim]),
        }
    }

    pub fn apply(&self, x: &TensorBase<S>) -> Result<TensorBase<S>, TensorError> {
        x.matmul_nt(&self.w)?.add_row(&self.b)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<S: Scalar> {
    pub gain: TensorBase<S>,
    pub bias: TensorBase<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn init(dim: usize) -> Self {
        Self {
            gain: ones_param(&[dim]),
            bias: zeros_param(&[dim]),
        }
    }

    pub fn apply(&self, x: &TensorBase<S>) -> Result<TensorBase<S>, TensorError> {
        x.layer_norm(&self.gain, &self.bias, s(LN_EPS))
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Token plus learned positional embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<S: Scalar> {
    pub tokens: TensorBase<S>,
    pub positions: TensorBase<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn init(vocab: usize, max_len: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        Self {
            tokens: normal_init(&[vocab, d_model], INIT_STD, rng),
            positions: normal_init(&[max_len, d_model], INIT_STD, rng),
        }
    }

    pub fn max_len(&self) -> usize {
        self.positions.shape()[0]
    }

    /// `tokens[ids] + positions[0..len]`.
    pub fn embed(&self, ids: &[usize]) -> Result<TensorBase<S>, TensorError> {
        if ids.len() > self.max_len() {
            return Err(TensorError::IndexOutOfBounds {
                op: "embed",
                index: ids.len(),
                size: self.max_len(),
            });
        }
        let pos: Vec<usize> = (0..ids.len()).collect();
        self.tokens
            .gather_rows(ids)?
            .add(&self.positions.gather_rows(&pos)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        out.push((format!("{prefix}.tokens"), self.tokens.clone()));
        out.push((format!("{prefix}.positions"), self.positions.clone()));
    }
}

/// Project hidden states onto the (tied) token table: `h E^T`, no bias.
pub fn lm_head<S: Scalar>(
    hidden: &TensorBase<S>,
    token_table: &TensorBase<S>,
) -> Result<TensorBase<S>, TensorError> {
    hidden.matmul_nt(token_table)
}

#[derive(Debug, Clone)]
pub struct Attention<S: Scalar> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub n_heads: usize,
}

impl<S: Scalar> Attention<S> {
    pub fn init(d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(n_heads > 0 && d_model % n_heads == 0, "d_model must split across heads");
        Self {
            wq: Linear::init(d_model, d_model, rng),
            wk: Linear::init(d_model, d_model, rng),
            wv: Linear::init(d_model, d_model, rng),
            wo: Linear::init(d_model, d_model, rng),
            n_heads,
        }
    }

    /// Attend from `q_in` (`[t_q, d]`) over `kv_in` (`[t_k, d]`). The mask,
    /// when given, is `[t_q, t_k]` with `true` marking visible positions.
    pub fn forward(
        &self,
        q_in: &TensorBase<S>,
        kv_in: &TensorBase<S>,
        mask: Option<&BoolMat>,
    ) -> Result<TensorBase<S>, TensorError> {
        let d_model = self.wq.w.shape()[0];
        let dh = d_model / self.n_heads;
        let scale = s::<S>(1.0 / (dh as f64).sqrt());
        let q = self.wq.apply(q_in)?;
        let k = self.wk.apply(kv_in)?;
        let v = self.wv.apply(kv_in)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul_nt(&kh)?.mul_scalar(scale);
            let weights = match mask {
                Some(m) => scores.masked_softmax(m)?,
                None => scores.softmax(1)?,
            };
            heads.push(weights.matmul(&vh)?);
        }
        let head_refs: Vec<&TensorBase<S>> = heads.iter().collect();
        let ctx = TensorBase::concat_cols(&head_refs)?;
        self.wo.apply(&ctx)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward<S: Scalar> {
    pub w1: Linear<S>,
    pub w2: Linear<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Linear::init(d_ff, d_model, rng),
            w2: Linear::init(d_model, d_ff, rng),
        }
    }

    pub fn apply(&self, x: &TensorBase<S>) -> Result<TensorBase<S>, TensorError> {
        self.w2.apply(&self.w1.apply(x)?.gelu())
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.w1.collect(&format!("{prefix}.w1"), out);
        self.w2.collect(&format!("{prefix}.w2"), out);
    }
}

fn maybe_dropout<S: Scalar>(
    t: TensorBase<S>,
    p: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<TensorBase<S>, TensorError> {
    match rng {
        Some(r) if p > 0.0 => t.dropout(p, r),
        _ => Ok(t),
    }
}

/// Pre-norm encoder layer: `x + attn(ln1 x)` then `x + ff(ln2 x)`.
#[derive(Debug, Clone)]
pub struct EncoderLayer<S: Scalar> {
    pub ln1: LayerNormParams<S>,
    pub attn: Attention<S>,
    pub ln2: LayerNormParams<S>,
    pub ff: FeedForward<S>,
    pub dropout: f64,
}

impl<S: Scalar> EncoderLayer<S> {
    pub fn init(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNormParams::init(cfg.d_model),
            attn: Attention::init(cfg.d_model, cfg.n_heads, rng),
            ln2: LayerNormParams::init(cfg.d_model),
            ff: FeedForward::init(cfg.d_model, cfg.d_ff, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(
        &self,
        x: &TensorBase<S>,
        mask: Option<&BoolMat>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let h = self.ln1.apply(x)?;
        let a = self.attn.forward(&h, &h, mask)?;
        let x = x.add(&maybe_dropout(a, self.dropout, rng)?)?;
        let f = self.ff.apply(&self.ln2.apply(&x)?)?;
        x.add(&maybe_dropout(f, self.dropout, rng)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ff.collect(&format!("{prefix}.ff"), out);
    }
}

/// Pre-norm decoder layer: self-attention, cross-attention over a memory,
/// then the feed-forward block.
#[derive(Debug, Clone)]
pub struct DecoderLayer<S: Scalar> {
    pub ln1: LayerNormParams<S>,
    pub self_attn: Attention<S>,
    pub ln2: LayerNormParams<S>,
    pub cross_attn: Attention<S>,
    pub ln3: LayerNormParams<S>,
    pub ff: FeedForward<S>,
    pub dropout: f64,
}

impl<S: Scalar> DecoderLayer<S> {
    pub fn init(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNormParams::init(cfg.d_model),
            self_attn: Attention::init(cfg.d_model, cfg.n_heads, rng),
            ln2: LayerNormParams::init(cfg.d_model),
            cross_attn: Attention::init(cfg.d_model, cfg.n_heads, rng),
            ln3: LayerNormParams::init(cfg.d_model),
            ff: FeedForward::init(cfg.d_model, cfg.d_ff, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(
        &self,
        x: &TensorBase<S>,
        memory: &TensorBase<S>,
        self_mask: Option<&BoolMat>,
        cross_mask: Option<&BoolMat>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let h = self.ln1.apply(x)?;
        let a = self.self_attn.forward(&h, &h, self_mask)?;
        let x = x.add(&maybe_dropout(a, self.dropout, rng)?)?;
        let c = self
            .cross_attn
            .forward(&self.ln2.apply(&x)?, memory, cross_mask)?;
        let x = x.add(&maybe_dropout(c, self.dropout, rng)?)?;
        let f = self.ff.apply(&self.ln3.apply(&x)?)?;
        x.add(&maybe_dropout(f, self.dropout, rng)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.ln3.collect(&format!("{prefix}.ln3"), out);
        self.ff.collect(&format!("{prefix}.ff"), out);
    }
}

/// Encoder stack. With zero layers the forward is the identity; no final
/// layer norm is applied here, callers add one where their architecture
/// wants it.
#[derive(Debug, Clone)]
pub struct Encoder<S: Scalar> {
    pub layers: Vec<EncoderLayer<S>>,
}

impl<S: Scalar> Encoder<S> {
    pub fn init(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            layers: (0..cfg.n_layers).map(|_| EncoderLayer::init(cfg, rng)).collect(),
        }
    }

    pub fn forward(
        &self,
        x: &TensorBase<S>,
        mask: Option<&BoolMat>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mask, &mut rng)?;
        }
        Ok(h)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.layer{i}"), out);
        }
    }
}

/// Decoder stack; same identity and normalization conventions as [`Encoder`].
#[derive(Debug, Clone)]
pub struct Decoder<S: Scalar> {
    pub layers: Vec<DecoderLayer<S>>,
}

impl<S: Scalar> Decoder<S> {
    pub fn init(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            layers: (0..cfg.n_layers).map(|_| DecoderLayer::init(cfg, rng)).collect(),
        }
    }

    pub fn forward(
        &self,
        x: &TensorBase<S>,
        memory: &TensorBase<S>,
        self_mask: Option<&BoolMat>,
        cross_mask: Option<&BoolMat>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, memory, self_mask, cross_mask, &mut rng)?;
        }
        Ok(h)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.layer{i}"), out);
        }
    }
}
