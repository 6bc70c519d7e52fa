//! Mode-conditioned captioner: an image encoder turns region features into a
//! memory, and a causal decoder generates a caption conditioned on that
//! memory plus one codebook entry added at every position. Decoding is
//! written against a step closure (prefix in, next-token log-probs out) so
//! search behavior can be tested independently of the model.

use rand::{Rng, RngCore};

use crate::corpus::Vocab;
use crate::nn::{
    lm_head, Decoder, EmbeddingTable, Encoder, LayerNormParams, Linear, ParamList,
    TransformerConfig,
};
use crate::scalar::Scalar;
use crate::tensor::{BoolMat, TensorBase, TensorError};
use crate::vq::CodebookBase;

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

#[derive(Debug, Clone)]
pub struct Mic<S: Scalar> {
    pub image_proj: Linear<S>,
    pub image_encoder: Encoder<S>,
    pub decoder: Decoder<S>,
    pub dec_ln: LayerNormParams<S>,
}

impl<S: Scalar> Mic<S> {
    pub fn init(
        d_img: usize,
        enc_cfg: &TransformerConfig,
        dec_cfg: &TransformerConfig,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(
            enc_cfg.d_model, dec_cfg.d_model,
            "image encoder and caption decoder must share d_model"
        );
        Self {
            image_proj: Linear::init(enc_cfg.d_model, d_img, rng),
            image_encoder: Encoder::init(enc_cfg, rng),
            decoder: Decoder::init(dec_cfg, rng),
            dec_ln: LayerNormParams::init(dec_cfg.d_model),
        }
    }

    pub fn collect(&self, out: &mut ParamList<S>) {
        self.image_proj.collect("mic.image_proj", out);
        self.image_encoder.collect("mic.enc", out);
        self.decoder.collect("mic.dec", out);
        self.dec_ln.collect("mic.dec_ln", out);
    }

    /// Region features to memory. Regions are an unordered set, so there are
    /// no positional embeddings on this path.
    pub fn encode_image(
        &self,
        features: &TensorBase<S>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let x = self.image_proj.apply(features)?;
        self.image_encoder.forward(&x, None, reborrow(rng))
    }

    /// Next-token logits for a teacher-forced input under a causal mask,
    /// with the mode vector added at every position.
    pub fn ar_logits(
        &self,
        emb: &EmbeddingTable<S>,
        mode_vec: &TensorBase<S>,
        memory: &TensorBase<S>,
        input_ids: &[usize],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let x = emb.embed(input_ids)?.add_row(mode_vec)?;
        let causal = BoolMat::causal(input_ids.len());
        let h = self
            .decoder
            .forward(&x, memory, Some(&causal), None, reborrow(rng))?;
        let h = self.dec_ln.apply(&h)?;
        lm_head(&h, &emb.tokens)
    }

    /// Teacher-forced loss: input [BOS] + caption, target caption + [EOS],
    /// mean over positions.
    pub fn ar_loss(
        &self,
        emb: &EmbeddingTable<S>,
        mode_vec: &TensorBase<S>,
        memory: &TensorBase<S>,
        caption: &[usize],
        smoothing: f64,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let mut input = Vec::with_capacity(caption.len() + 1);
        input.push(Vocab::BOS);
        input.extend_from_slice(caption);
        let mut target = caption.to_vec();
        target.push(Vocab::EOS);
        let logits = self.ar_logits(emb, mode_vec, memory, &input, rng)?;
        logits.cross_entropy_smoothed(&target, smoothing, Some(Vocab::PAD))
    }

    /// Build a decoding step closure for one (mode, image) pair. The closure
    /// maps a [BOS]-prefixed id sequence to next-token log-probs in f64.
    pub fn step_fn<'a>(
        &'a self,
        emb: &EmbeddingTable<S>,
        mode_vec: &TensorBase<S>,
        memory: &TensorBase<S>,
    ) -> impl FnMut(&[usize]) -> Result<Vec<f64>, TensorError> + 'a {
        let emb = emb.clone();
        let mode_vec = mode_vec.clone();
        let memory = memory.clone();
        move |prefix: &[usize]| {
            let mut rng: Option<&mut dyn RngCore> = None;
            let logits = self.ar_logits(&emb, &mode_vec, &memory, prefix, &mut rng)?;
            let (rows, v) = (logits.shape()[0], logits.shape()[1]);
            let data = logits.to_vec();
            let last: Vec<f64> = data[(rows - 1) * v..]
                .iter()
                .map(|x| x.to_f64_lossy())
                .collect();
            Ok(log_softmax_f64(&last))
        }
    }

    /// One caption per requested codebook entry, in the given order. Mode
    /// vectors are detached entry rows; decoding never builds grad state.
    pub fn generate_modes(
        &self,
        emb: &EmbeddingTable<S>,
        codebook: &CodebookBase<S>,
        features: &TensorBase<S>,
        modes: &[usize],
        decode: DecodeKind,
        length_norm: f64,
        max_len: usize,
    ) -> Result<Vec<GeneratedCaption>, TensorError> {
        let mut rng: Option<&mut dyn RngCore> = None;
        let memory = self.encode_image(features, &mut rng)?;
        let mut out = Vec::with_capacity(modes.len());
        for &k in modes {
            let mode_vec = codebook.entries.gather_rows(&[k])?.detach();
            let d = self.decode_with_vector(emb, &mode_vec, &memory, decode, length_norm, max_len)?;
            out.push(GeneratedCaption {
                mode: k,
                tokens: d.tokens,
                logprob: d.logprob,
                truncated: d.truncated,
            });
        }
        Ok(out)
    }

    /// Decode one caption from an explicit mode vector (a codebook row, an
    /// interpolation, or zeros for an unconditioned baseline).
    pub fn decode_with_vector(
        &self,
        emb: &EmbeddingTable<S>,
        mode_vec: &TensorBase<S>,
        memory: &TensorBase<S>,
        decode: DecodeKind,
        length_norm: f64,
        max_len: usize,
    ) -> Result<Decoded, TensorError> {
        let mut step = self.step_fn(emb, mode_vec, memory);
        match decode {
            DecodeKind::Greedy => greedy_decode(&mut step, max_len),
            DecodeKind::Beam { width } => {
                let hyps = beam_decode(&mut step, max_len, width, length_norm)?;
                let best = hyps.into_iter().next().expect("beam returns a hypothesis");
                Ok(Decoded {
                    tokens: best.tokens,
                    logprob: best.score,
                    truncated: best.truncated,
                })
            }
        }
    }

    /// [`Self::generate_modes`] over every codebook entry.
    pub fn generate_all_modes(
        &self,
        emb: &EmbeddingTable<S>,
        codebook: &CodebookBase<S>,
        features: &TensorBase<S>,
        decode: DecodeKind,
        length_norm: f64,
        max_len: usize,
    ) -> Result<Vec<GeneratedCaption>, TensorError> {
        let modes: Vec<usize> = (0..codebook.len()).collect();
        self.generate_modes(emb, codebook, features, &modes, decode, length_norm, max_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeKind {
    Greedy,
    Beam { width: usize },
}

/// A decoded caption with its provenance: which mode conditioned it, the
/// summed log-probability of the chosen tokens (including the [EOS] step
/// when one ended it), and whether the length cap cut it off instead.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GeneratedCaption {
    pub mode: usize,
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub truncated: bool,
}

fn log_softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|&x| (x - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Argmax with ties resolved to the lowest index.
fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding output: tokens without BOS/EOS, the chosen-token log-prob
/// sum, and whether the length cap stopped it before an [EOS].
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub truncated: bool,
}

/// Greedy decoding: start from [BOS], append the argmax token each step,
/// stop at [EOS] or after `max_len` tokens.
pub fn greedy_decode<F>(step: &mut F, max_len: usize) -> Result<Decoded, TensorError>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>, TensorError>,
{
    let mut prefix = vec![Vocab::BOS];
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    while tokens.len() < max_len {
        let logp = step(&prefix)?;
        let next = argmax_lowest(&logp);
        logprob += logp[next];
        if next == Vocab::EOS {
            return Ok(Decoded {
                tokens,
                logprob,
                truncated: false,
            });
        }
        tokens.push(next);
        prefix.push(next);
    }
    Ok(Decoded {
        tokens,
        logprob,
        truncated: true,
    })
}

/// A finished beam hypothesis. `score` is the raw log-prob sum (including
/// the [EOS] step when the hypothesis ended with one); `normalized` divides
/// by length^alpha and is what the ranking uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub normalized: f64,
    pub truncated: bool,
}

pub fn normalized_score(score: f64, len: usize, alpha: f64) -> f64 {
    score / (len.max(1) as f64).powf(alpha)
}

/// Beam search over the same step closure. Each round expands every live
/// prefix by every token and keeps the best `width` candidates jointly; a
/// candidate that selects [EOS] retires to the finished pool and frees its
/// slot. Ordering is stable in (parent, token) order, so exact ties resolve
/// to the earlier parent and lower token id, and width 1 reproduces greedy
/// decoding bit for bit. Hypotheses still alive at the length cap are
/// finished as they stand. Results come back sorted by normalized score.
pub fn beam_decode<F>(
    step: &mut F,
    max_len: usize,
    width: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>, TensorError>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>, TensorError>,
{
    assert!(width > 0, "beam width must be positive");
    struct Alive {
        prefix: Vec<usize>,
        score: f64,
    }
    let mut alive = vec![Alive {
        prefix: vec![Vocab::BOS],
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        // (candidate score, parent index, token), generated in stable order.
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (pi, hyp) in alive.iter().enumerate() {
            let logp = step(&hyp.prefix)?;
            for (tok, &lp) in logp.iter().enumerate() {
                cands.push((hyp.score + lp, pi, tok));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut next = Vec::with_capacity(width);
        for &(score, pi, tok) in cands.iter().take(width) {
            if tok == Vocab::EOS {
                let tokens: Vec<usize> = alive[pi].prefix[1..].to_vec();
                let normalized = normalized_score(score, tokens.len(), alpha);
                finished.push(Hypothesis {
                    tokens,
                    score,
                    normalized,
                    truncated: false,
                });
            } else {
                let mut prefix = alive[pi].prefix.clone();
                prefix.push(tok);
                next.push(Alive { prefix, score });
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    for hyp in alive {
        let tokens: Vec<usize> = hyp.prefix[1..].to_vec();
        let normalized = normalized_score(hyp.score, tokens.len(), alpha);
        finished.push(Hypothesis {
            tokens,
            score: hyp.score,
            normalized,
            truncated: true,
        });
    }
    finished.sort_by(|a, b| {
        b.normalized
            .partial_cmp(&a.normalized)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(finished)
}
