//! Caption-to-mode branch: a bidirectional encoder reads the caption into a
//! continuous code at a leading [MODE] slot, the codebook quantizes it, and a
//! fully non-autoregressive decoder reconstructs the caption from the
//! quantized code plus the image memory. With the input fully masked, the
//! only caption-specific signal the decoder sees is the mode vector, so the
//! code is forced to carry whatever the image alone cannot explain.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::nn::{lm_head, Decoder, Encoder, EmbeddingTable, LayerNormParams, ParamList, TransformerConfig};
use crate::scalar::{s, Scalar};
use crate::tensor::{TensorBase, TensorError};
use crate::vq::{AssignmentStrategy, CodebookBase, VqError};

/// How much of the reconstruction input gets replaced by [MASK].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskingStrategy {
    /// Every position masked; the decoder is purely non-autoregressive.
    Full,
    FixedProb { prob: f64 },
    /// Ramp the mask ratio linearly over training.
    LinearRamp { start: f64, end: f64 },
}

impl MaskingStrategy {
    pub fn ratio_at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            MaskingStrategy::Full => 1.0,
            MaskingStrategy::FixedProb { prob } => prob.clamp(0.0, 1.0),
            MaskingStrategy::LinearRamp { start, end } => {
                let t = if total_steps == 0 {
                    1.0
                } else {
                    (step as f64 / total_steps as f64).clamp(0.0, 1.0)
                };
                (start + (end - start) * t).clamp(0.0, 1.0)
            }
        }
    }
}

/// Replace each token by [MASK] with probability `ratio`. The endpoints skip
/// the random draws entirely so ratio 1.0 and 0.0 stay rng-free.
pub fn apply_masking(tokens: &[usize], ratio: f64, rng: &mut Option<&mut dyn RngCore>) -> Vec<usize> {
    if ratio >= 1.0 {
        return vec![Vocab::MASK; tokens.len()];
    }
    if ratio <= 0.0 {
        return tokens.to_vec();
    }
    let rng = rng
        .as_mut()
        .expect("partial masking needs a random source");
    tokens
        .iter()
        .map(|&t| if rng.gen::<f64>() < ratio { Vocab::MASK } else { t })
        .collect()
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

/// Per-batch outcome of [`CdVae::step`].
#[derive(Debug)]
pub struct CdVaeStep<S: Scalar> {
    /// Reconstruction + codebook + beta * commitment, normalized per caption.
    pub loss: TensorBase<S>,
    pub recon_loss: S,
    pub codebook_loss: S,
    pub commitment_loss: S,
    /// Mode id chosen for each caption, per image.
    pub assignments: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct CdVae<S: Scalar> {
    pub mode_encoder: Encoder<S>,
    pub decoder: Decoder<S>,
    pub dec_ln: LayerNormParams<S>,
}

impl<S: Scalar> CdVae<S> {
    pub fn init(
        enc_cfg: &TransformerConfig,
        dec_cfg: &TransformerConfig,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(
            enc_cfg.d_model, dec_cfg.d_model,
            "mode encoder and reconstruction decoder must share d_model"
        );
        Self {
            mode_encoder: Encoder::init(enc_cfg, rng),
            decoder: Decoder::init(dec_cfg, rng),
            dec_ln: LayerNormParams::init(dec_cfg.d_model),
        }
    }

    pub fn collect(&self, out: &mut ParamList<S>) {
        self.mode_encoder.collect("cdvae.enc", out);
        self.decoder.collect("cdvae.dec", out);
        self.dec_ln.collect("cdvae.dec_ln", out);
    }

    /// Continuous mode code: run [MODE] plus the caption through the mode
    /// encoder and take the raw last-layer residual at the [MODE] slot.
    /// Deliberately no final normalization, so codes keep their scale spread
    /// and stay separable for quantization.
    pub fn encode_mode(
        &self,
        emb: &EmbeddingTable<S>,
        caption: &[usize],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let mut ids = Vec::with_capacity(caption.len() + 1);
        ids.push(Vocab::MODE);
        ids.extend_from_slice(caption);
        let x = emb.embed(&ids)?;
        let h = self.mode_encoder.forward(&x, None, reborrow(rng))?;
        h.gather_rows(&[0])
    }

    /// Vocabulary logits for every position of a (possibly masked) input.
    /// The mode vector is added at every position; the image memory is
    /// detached so this branch never trains the image encoder.
    pub fn nat_logits(
        &self,
        emb: &EmbeddingTable<S>,
        mode_vec: &TensorBase<S>,
        memory: &TensorBase<S>,
        input_ids: &[usize],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<TensorBase<S>, TensorError> {
        let x = emb.embed(input_ids)?.add_row(mode_vec)?;
        let frozen = memory.detach();
        let h = self.decoder.forward(&x, &frozen, None, None, reborrow(rng))?;
        let h = self.dec_ln.apply(&h)?;
        lm_head(&h, &emb.tokens)
    }

    /// Per-caption reconstruction loss (mean over positions) and the logits.
    pub fn reconstruct(
        &self,
        emb: &EmbeddingTable<S>,
        mode_vec: &TensorBase<S>,
        memory: &TensorBase<S>,
        input_ids: &[usize],
        target: &[usize],
        smoothing: f64,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(TensorBase<S>, TensorBase<S>), TensorError> {
        assert_eq!(
            input_ids.len(),
            target.len(),
            "masked input and target must align position by position"
        );
        let logits = self.nat_logits(emb, mode_vec, memory, input_ids, rng)?;
        let loss = logits.cross_entropy_smoothed(target, smoothing, Some(Vocab::PAD))?;
        Ok((loss, logits))
    }

    /// Full branch pass over a batch of images. Every caption of an image is
    /// encoded, the image's codes are assigned to codebook entries (injective
    /// under the matching strategy), and each caption is reconstructed from
    /// its quantized code. All three loss terms are normalized by the total
    /// caption count.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        emb: &EmbeddingTable<S>,
        codebook: &CodebookBase<S>,
        memories: &[TensorBase<S>],
        captions: &[Vec<Vec<usize>>],
        strategy: AssignmentStrategy,
        mask_ratio: f64,
        beta: S,
        smoothing: f64,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<CdVaeStep<S>, VqError> {
        assert_eq!(memories.len(), captions.len(), "one caption set per image");
        let mut recon_sum: Option<TensorBase<S>> = None;
        let mut cb_sum: Option<TensorBase<S>> = None;
        let mut commit_sum: Option<TensorBase<S>> = None;
        let mut assignments = Vec::with_capacity(captions.len());
        let mut n_caps = 0usize;
        let fold = |acc: &mut Option<TensorBase<S>>, term: TensorBase<S>| -> Result<(), TensorError> {
            *acc = Some(match acc.take() {
                Some(a) => a.add(&term)?,
                None => term,
            });
            Ok(())
        };
        for (memory, caps) in memories.iter().zip(captions) {
            let rows: Vec<TensorBase<S>> = caps
                .iter()
                .map(|c| self.encode_mode(emb, c, rng))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&TensorBase<S>> = rows.iter().collect();
            let e = TensorBase::concat_rows(&refs)?;
            let assignment = codebook.assign(&e, strategy)?;
            let terms = codebook.vq_losses(&e, &assignment)?;
            fold(&mut cb_sum, terms.codebook_loss)?;
            fold(&mut commit_sum, terms.commitment_loss)?;
            for (j, cap) in caps.iter().enumerate() {
                let mode_vec = terms.quantized.gather_rows(&[j])?;
                // T comes from the reference; this decoder is never sampled,
                // so there is no end marker and no length predictor.
                let input_ids = apply_masking(cap, mask_ratio, rng);
                let (loss, _) =
                    self.reconstruct(emb, &mode_vec, memory, &input_ids, cap, smoothing, rng)?;
                fold(&mut recon_sum, loss)?;
                n_caps += 1;
            }
            assignments.push(assignment);
        }
        let scale = s::<S>(1.0 / n_caps as f64);
        let recon = recon_sum.expect("at least one caption").mul_scalar(scale);
        let cb = cb_sum.expect("at least one image").mul_scalar(scale);
        let commit = commit_sum.expect("at least one image").mul_scalar(scale);
        let loss = recon.add(&cb)?.add(&commit.mul_scalar(beta))?;
        Ok(CdVaeStep {
            loss,
            recon_loss: recon.item(),
            codebook_loss: cb.item(),
            commitment_loss: commit.item(),
            assignments,
        })
    }
}
