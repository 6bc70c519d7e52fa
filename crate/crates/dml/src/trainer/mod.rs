//! Joint training of the two branches: one summed loss, one backward pass,
//! AdamW with warmup+cosine schedule, global-norm clipping, and checkpoints
//! that restore training bit-for-bit.
//!
//! Gradient separation between the branches is enforced by detach boundaries
//! inside the model code, not by update ordering: the reconstruction branch
//! sees a frozen image memory, and the captioner sees frozen codebook rows
//! unless `mic_updates_codebook` is flipped on.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdvae::{CdVae, CdVaeStep, MaskingStrategy};
use crate::corpus::TrainInstance;
use crate::mic::Mic;
use crate::nn::{EmbeddingTable, ParamList, TransformerConfig};
use crate::scalar::{s, Scalar};
use crate::tensor::{TensorBase, TensorError};
use crate::vq::{AssignmentStrategy, CodebookBase, UsageTracker, VqError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training aborted at step {step}: non-finite loss ({detail})")]
    NonFinite { step: usize, detail: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("configuration: {0}")]
    Config(String),
}

/// Sizes of every learned component. The two presets differ only in scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Mode encoder depth (reconstruction branch).
    pub mode_enc_layers: usize,
    /// Masked reconstruction decoder depth.
    pub mode_dec_layers: usize,
    /// Image encoder depth (captioning branch).
    pub image_enc_layers: usize,
    /// Caption decoder depth.
    pub caption_dec_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Codebook size.
    pub k: usize,
    /// Width of the precomputed region features.
    pub d_img: usize,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn paper() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            mode_enc_layers: 6,
            mode_dec_layers: 2,
            image_enc_layers: 6,
            caption_dec_layers: 6,
            max_len: 24,
            dropout: 0.1,
            k: 64,
            d_img: 2048,
        }
    }

    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            mode_enc_layers: 2,
            mode_dec_layers: 1,
            image_enc_layers: 1,
            caption_dec_layers: 2,
            max_len: 20,
            dropout: 0.0,
            k: 16,
            d_img: 32,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(TrainError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, v) in [
            ("d_ff", self.d_ff),
            ("mode_enc_layers", self.mode_enc_layers),
            ("mode_dec_layers", self.mode_dec_layers),
            ("image_enc_layers", self.image_enc_layers),
            ("caption_dec_layers", self.caption_dec_layers),
            ("k", self.k),
            ("d_img", self.d_img),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.max_len < 2 {
            return Err(TrainError::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn transformer(&self, n_layers: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers,
            dropout: self.dropout,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub images_per_batch: usize,
    /// Captions per image fed to the captioning branch; the reconstruction
    /// branch always consumes the full caption set.
    pub sampled_caps_per_image: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub label_smoothing: f64,
    pub beta: f64,
    pub masking: MaskingStrategy,
    #[serde(default = "TrainConfig::default_assignment")]
    pub assignment: AssignmentStrategy,
    pub seed: u64,
    pub preset: String,
    /// When false the reconstruction branch is skipped entirely and the
    /// captioner runs on a zero mode vector: the no-mode baseline.
    #[serde(default = "default_true")]
    pub mode_conditioning: bool,
    /// Let captioner gradients reach the codebook (off by default: the
    /// codebook is shaped only by the reconstruction objective).
    #[serde(default)]
    pub mic_updates_codebook: bool,
}

impl TrainConfig {
    fn default_assignment() -> AssignmentStrategy {
        AssignmentStrategy::Hungarian
    }

    pub fn paper() -> Self {
        Self {
            total_steps: 100_000,
            images_per_batch: 64,
            sampled_caps_per_image: 1,
            learning_rate: 2e-4,
            weight_decay: 0.01,
            warmup_steps: 2000,
            grad_clip_norm: 1.0,
            label_smoothing: 0.1,
            beta: 0.25,
            masking: MaskingStrategy::Full,
            assignment: AssignmentStrategy::Hungarian,
            seed: 17,
            preset: "paper".into(),
            mode_conditioning: true,
            mic_updates_codebook: false,
        }
    }

    pub fn desk() -> Self {
        Self {
            total_steps: 1200,
            images_per_batch: 8,
            sampled_caps_per_image: 1,
            learning_rate: 2e-3,
            weight_decay: 0.01,
            warmup_steps: 100,
            grad_clip_norm: 1.0,
            label_smoothing: 0.1,
            beta: 0.25,
            masking: MaskingStrategy::Full,
            assignment: AssignmentStrategy::Hungarian,
            seed: 17,
            preset: "desk".into(),
            mode_conditioning: true,
            mic_updates_codebook: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_steps == 0 || self.images_per_batch == 0 {
            return Err(TrainError::Config(
                "total_steps and images_per_batch must be positive".into(),
            ));
        }
        if self.sampled_caps_per_image == 0 {
            return Err(TrainError::Config(
                "sampled_caps_per_image must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be nonnegative".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(TrainError::Config("grad_clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.beta < 0.0 {
            return Err(TrainError::Config("beta must be nonnegative".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config(
                "warmup_steps must not exceed total_steps".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup to the base rate, then cosine decay
/// that reaches exactly zero at `total_steps`.
pub fn lr_at(step: usize, base: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; returns the scale applied (1.0 when untouched). The norm is
/// accumulated in f64 regardless of the parameter scalar type.
pub fn clip_gradients<S: Scalar>(params: &ParamList<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g {
                let x = v.to_f64_lossy();
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    let k = s::<S>(scale);
    for (_, p) in params {
        p.with_grad_mut(|g| {
            for v in g {
                *v = *v * k;
            }
        });
    }
    scale
}

/// Adam with decoupled weight decay. Moment buffers follow the parameter
/// list order, so the list must be collected the same way every time.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamList<S>) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that has a gradient. Parameters that
    /// never entered the graph this step keep their moments untouched.
    pub fn apply(&mut self, params: &ParamList<S>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let b1 = s::<S>(ADAM_BETA1);
        let b2 = s::<S>(ADAM_BETA2);
        let eps = s::<S>(ADAM_EPS);
        let one = S::one();
        let bc1 = one - b1.powi(self.t as i32);
        let bc2 = one - b2.powi(self.t as i32);
        let lr_s = s::<S>(lr);
        let wd = s::<S>(weight_decay);
        for (i, (_, p)) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.with_data_mut(|data| {
                for j in 0..data.len() {
                    m[j] = b1 * m[j] + (one - b1) * g[j];
                    v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] = data[j] - lr_s * (mhat / (vhat.sqrt() + eps) + wd * data[j]);
                }
            });
        }
    }
}

/// The full parameter stack: shared embeddings, codebook, both branches.
#[derive(Debug, Clone)]
pub struct DmlModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub emb: EmbeddingTable<S>,
    pub codebook: CodebookBase<S>,
    pub cdvae: CdVae<S>,
    pub mic: Mic<S>,
}

impl<S: Scalar> DmlModel<S> {
    pub fn init(vocab_size: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let emb = EmbeddingTable::init(vocab_size, cfg.max_len, cfg.d_model, rng);
        let codebook = CodebookBase::init(cfg.k, cfg.d_model, rng);
        let cdvae = CdVae::init(
            &cfg.transformer(cfg.mode_enc_layers),
            &cfg.transformer(cfg.mode_dec_layers),
            rng,
        );
        let mic = Mic::init(
            cfg.d_img,
            &cfg.transformer(cfg.image_enc_layers),
            &cfg.transformer(cfg.caption_dec_layers),
            rng,
        );
        Self {
            cfg: cfg.clone(),
            emb,
            codebook,
            cdvae,
            mic,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.emb.tokens.shape()[0]
    }

    /// Every learned tensor under a stable unique name.
    pub fn collect(&self) -> ParamList<S> {
        let mut out = ParamList::new();
        self.emb.collect("emb", &mut out);
        out.push(("codebook.entries".into(), self.codebook.entries.clone()));
        self.cdvae.collect(&mut out);
        self.mic.collect(&mut out);
        out
    }

    /// Bind one image's captions to codebook entries exactly as training
    /// does: encode each caption's mode, stack, assign.
    pub fn assign_modes(
        &self,
        captions: &[Vec<usize>],
        strategy: AssignmentStrategy,
    ) -> Result<Vec<usize>, TrainError> {
        let mut rng: Option<&mut dyn RngCore> = None;
        let rows: Vec<TensorBase<S>> = captions
            .iter()
            .map(|c| self.cdvae.encode_mode(&self.emb, c, &mut rng))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&TensorBase<S>> = rows.iter().collect();
        let e = TensorBase::concat_rows(&refs)?;
        Ok(self.codebook.assign(&e, strategy)?)
    }
}

/// Per-step record written to the training log, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub cdvae_loss: f64,
    pub mic_loss: f64,
    pub vq_loss: f64,
    pub commit_loss: f64,
    pub lr: f64,
    pub effective_modes: usize,
}

/// Both branch losses for one batch, still attached to the graph.
pub struct StepLosses<S: Scalar> {
    pub total: TensorBase<S>,
    pub cdvae: Option<CdVaeStep<S>>,
    pub mic_loss: TensorBase<S>,
    pub sampled: usize,
}

/// Deterministic per-step RNG: a hash of (seed, step, stream) keys a fresh
/// stream cipher, so any step can be replayed without running its
/// predecessors.
fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut x = seed
        ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

/// Images for one step: sequential cycling, a pure function of the step.
pub fn batch_for_step(data: &[TrainInstance], step: usize, images_per_batch: usize) -> Vec<&TrainInstance> {
    let n = data.len();
    (0..images_per_batch)
        .map(|i| &data[(step * images_per_batch + i) % n])
        .collect()
}

/// Region features as a `[r, d_img]` tensor.
pub fn features_tensor<S: Scalar>(rows: &[Vec<f64>]) -> Result<TensorBase<S>, TensorError> {
    let r = rows.len();
    let d = rows.first().map_or(0, |row| row.len());
    let flat: Vec<S> = rows.iter().flat_map(|row| row.iter().map(|&x| s::<S>(x))).collect();
    TensorBase::from_vec(flat, &[r, d])
}

/// Forward both branches over one batch and sum the losses. Pure in the
/// parameters: calling it twice with the same arguments gives bit-identical
/// values, which is what the decomposition and determinism tests lean on.
pub fn compute_step_losses<S: Scalar>(
    model: &DmlModel<S>,
    batch: &[&TrainInstance],
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepLosses<S>, TrainError> {
    let mut model_rng = step_rng(cfg.seed, step, 0);
    let mut sample_rng = step_rng(cfg.seed, step, 1);
    let mut fwd: Option<&mut dyn RngCore> = Some(&mut model_rng);

    let mut memories = Vec::with_capacity(batch.len());
    for inst in batch {
        let feats = features_tensor::<S>(&inst.features)?;
        memories.push(model.mic.encode_image(&feats, &mut fwd)?);
    }

    let cdvae = if cfg.mode_conditioning {
        let captions: Vec<Vec<Vec<usize>>> = batch.iter().map(|b| b.captions.clone()).collect();
        let ratio = cfg.masking.ratio_at(step, cfg.total_steps);
        Some(model.cdvae.step(
            &model.emb,
            &model.codebook,
            &memories,
            &captions,
            cfg.assignment,
            ratio,
            s::<S>(cfg.beta),
            cfg.label_smoothing,
            &mut fwd,
        )?)
    } else {
        None
    };

    let mut mic_sum: Option<TensorBase<S>> = None;
    let mut sampled = 0usize;
    for (i, inst) in batch.iter().enumerate() {
        let n_caps = inst.captions.len();
        let take = cfg.sampled_caps_per_image.min(n_caps);
        let mut order: Vec<usize> = (0..n_caps).collect();
        order.shuffle(&mut sample_rng);
        order.truncate(take);
        order.sort_unstable();
        for &j in &order {
            let mode_vec = match &cdvae {
                Some(c) => {
                    let row = model.codebook.entries.gather_rows(&[c.assignments[i][j]])?;
                    if cfg.mic_updates_codebook {
                        row
                    } else {
                        row.detach()
                    }
                }
                None => TensorBase::from_vec(
                    vec![S::zero(); model.cfg.d_model],
                    &[1, model.cfg.d_model],
                )?,
            };
            let loss = model.mic.ar_loss(
                &model.emb,
                &mode_vec,
                &memories[i],
                &inst.captions[j],
                cfg.label_smoothing,
                &mut fwd,
            )?;
            mic_sum = Some(match mic_sum.take() {
                Some(acc) => acc.add(&loss)?,
                None => loss,
            });
            sampled += 1;
        }
    }
    let mic_loss = mic_sum
        .ok_or_else(|| TrainError::Config("batch produced no captions".into()))?
        .mul_scalar(s::<S>(1.0 / sampled as f64));

    let total = match &cdvae {
        Some(c) => c.loss.add(&mic_loss)?,
        None => mic_loss.clone(),
    };
    Ok(StepLosses {
        total,
        cdvae,
        mic_loss,
        sampled,
    })
}

/// Mutable training state: model, collected parameter list, optimizer
/// moments, usage counts, and the step cursor.
#[derive(Debug)]
pub struct Trainer<S: Scalar> {
    pub model: DmlModel<S>,
    pub params: ParamList<S>,
    pub opt: AdamW<S>,
    pub cfg: TrainConfig,
    pub usage: UsageTracker,
    pub step: usize,
    pub last_metrics: Option<StepMetrics>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: DmlModel<S>, cfg: TrainConfig) -> Result<Self, TrainError> {
        model.cfg.validate()?;
        cfg.validate()?;
        let params = model.collect();
        let opt = AdamW::new(&params);
        let k = model.codebook.len();
        Ok(Self {
            model,
            params,
            opt,
            cfg,
            usage: UsageTracker::new(k),
            step: 0,
            last_metrics: None,
        })
    }

    /// One optimization step over the given images. Aborts with a diagnostic
    /// dump instead of updating from a non-finite loss.
    pub fn train_step(&mut self, batch: &[&TrainInstance]) -> Result<StepMetrics, TrainError> {
        let losses = compute_step_losses(&self.model, batch, self.step, &self.cfg)?;
        let (cd_recon, cd_vq, cd_commit) = match &losses.cdvae {
            Some(c) => (
                c.recon_loss.to_f64_lossy(),
                c.codebook_loss.to_f64_lossy(),
                c.commitment_loss.to_f64_lossy(),
            ),
            None => (0.0, 0.0, 0.0),
        };
        let mic_v = losses.mic_loss.item().to_f64_lossy();
        let total_v = losses.total.item().to_f64_lossy();
        if !total_v.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                detail: format!(
                    "total {total_v}, recon {cd_recon}, vq {cd_vq}, commit {cd_commit}, mic {mic_v}"
                ),
            });
        }
        losses.total.backward()?;
        clip_gradients(&self.params, self.cfg.grad_clip_norm);
        let lr = lr_at(
            self.step,
            self.cfg.learning_rate,
            self.cfg.warmup_steps,
            self.cfg.total_steps,
        );
        self.opt.apply(&self.params, lr, self.cfg.weight_decay);
        for (_, p) in &self.params {
            p.clear_grad();
        }
        if let Some(c) = &losses.cdvae {
            for a in &c.assignments {
                self.usage.record(a);
            }
        }
        let metrics = StepMetrics {
            step: self.step,
            cdvae_loss: cd_recon,
            mic_loss: mic_v,
            vq_loss: cd_vq,
            commit_loss: cd_commit,
            lr,
            effective_modes: self.usage.effective_modes(),
        };
        self.step += 1;
        self.last_metrics = Some(metrics.clone());
        Ok(metrics)
    }

    /// Drive training from the current step to `total_steps`, writing one
    /// JSON line per step (so usage is reported at every 100-step mark too)
    /// and checkpointing every `checkpoint_every` steps when a directory is
    /// given.
    pub fn run(
        &mut self,
        data: &[TrainInstance],
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
        checkpoint_every: usize,
    ) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("training data is empty".into()));
        }
        let caps = data[0].captions.len();
        if self.cfg.sampled_caps_per_image > caps {
            return Err(TrainError::Config(format!(
                "sampled_caps_per_image {} exceeds the {caps} captions per image",
                self.cfg.sampled_caps_per_image
            )));
        }
        while self.step < self.cfg.total_steps {
            let batch = batch_for_step(data, self.step, self.cfg.images_per_batch);
            let metrics = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &metrics)?;
                writeln!(w)?;
            }
            if let Some(dir) = checkpoint_dir {
                if checkpoint_every > 0 && self.step % checkpoint_every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(())
    }

    /// Write `manifest.json` plus `tensors.bin` (little-endian f64: every
    /// parameter, then the optimizer moments). Loading restores forward
    /// passes and training continuation bit-for-bit.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, shape: Vec<usize>, data: &[S], entries: &mut Vec<TensorEntry>, blob: &mut Vec<u8>| {
            for v in data {
                blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
            let len = data.len() as u64;
            entries.push(TensorEntry {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        };
        for (name, p) in &self.params {
            push(name.clone(), p.shape().to_vec(), &p.data(), &mut entries, &mut blob);
        }
        for (i, (name, p)) in self.params.iter().enumerate() {
            let shape = p.shape().to_vec();
            push(format!("optim.{name}.m"), shape.clone(), &self.opt.m[i], &mut entries, &mut blob);
            push(format!("optim.{name}.v"), shape, &self.opt.v[i], &mut entries, &mut blob);
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            vocab_size: self.model.vocab_size(),
            step: self.step,
            opt_steps: self.opt.steps(),
            usage_counts: self.usage.counts.clone(),
            last_metrics: self.last_metrics.clone(),
            tensors: entries,
        };
        fs::write(dir.join("tensors.bin"), blob)?;
        let file = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint directory.
    pub fn load_checkpoint(dir: &Path) -> Result<Self, TrainError> {
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Format(format!(
                "format version {} in manifest, this build reads {}",
                manifest.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        manifest.model.validate()?;
        manifest.train.validate()?;
        let bytes = fs::read(dir.join("tensors.bin"))?;
        if bytes.len() % 8 != 0 {
            return Err(TrainError::Format("tensor blob is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut index: HashMap<&str, &TensorEntry> = HashMap::new();
        for e in &manifest.tensors {
            if index.insert(e.name.as_str(), e).is_some() {
                return Err(TrainError::Format(format!("duplicate tensor {}", e.name)));
            }
        }
        let read = |e: &TensorEntry| -> Result<Vec<S>, TrainError> {
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if end > values.len() {
                return Err(TrainError::Format(format!(
                    "tensor {} extends past the blob",
                    e.name
                )));
            }
            Ok(values[start..end].iter().map(|&x| s::<S>(x)).collect())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(manifest.train.seed);
        let model = DmlModel::<S>::init(manifest.vocab_size, &manifest.model, &mut rng);
        let params = model.collect();
        let mut opt = AdamW::new(&params);
        opt.t = manifest.opt_steps;
        let mut used = 0usize;
        for (i, (name, p)) in params.iter().enumerate() {
            let entry = *index
                .get(name.as_str())
                .ok_or_else(|| TrainError::Format(format!("missing tensor {name}")))?;
            if entry.shape != p.shape() || entry.len as usize != p.numel() {
                return Err(TrainError::Format(format!("shape mismatch for {name}")));
            }
            let data = read(entry)?;
            p.with_data_mut(|buf| buf.copy_from_slice(&data));
            used += 1;
            for (slot, suffix) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let key = format!("optim.{name}.{suffix}");
                let entry = *index
                    .get(key.as_str())
                    .ok_or_else(|| TrainError::Format(format!("missing tensor {key}")))?;
                if entry.len as usize != p.numel() {
                    return Err(TrainError::Format(format!("shape mismatch for {key}")));
                }
                *slot = read(entry)?;
                used += 1;
            }
        }
        if used != manifest.tensors.len() {
            return Err(TrainError::Format(format!(
                "{} tensors in manifest, {used} expected by this model",
                manifest.tensors.len()
            )));
        }
        if manifest.usage_counts.len() != model.codebook.len() {
            return Err(TrainError::Format("usage counts do not match the codebook size".into()));
        }
        Ok(Self {
            model,
            params,
            opt,
            usage: UsageTracker {
                counts: manifest.usage_counts.clone(),
            },
            cfg: manifest.train,
            step: manifest.step,
            last_metrics: manifest.last_metrics,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset and length in f64 elements within the blob.
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    vocab_size: usize,
    step: usize,
    opt_steps: u64,
    usage_counts: Vec<u64>,
    last_metrics: Option<StepMetrics>,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, Vocab};

    type T = TensorBase<f64>;

    #[test]
    fn schedule_warms_up_linearly_then_decays_to_exactly_zero() {
        let base = 2e-4;
        assert!((lr_at(0, base, 4, 104) - base * 0.25).abs() < 1e-18);
        assert!((lr_at(3, base, 4, 104) - base).abs() < 1e-18);
        // Midpoint of the cosine leg sits at half the base rate.
        assert!((lr_at(54, base, 4, 104) - base * 0.5).abs() < 1e-12);
        assert_eq!(lr_at(104, base, 4, 104), 0.0);
        assert_eq!(lr_at(500, base, 4, 104), 0.0);
        // No warmup: the first step already runs at full rate.
        assert!((lr_at(0, base, 0, 10) - base).abs() < 1e-18);
    }

    #[test]
    fn adamw_single_scalar_step_matches_hand_computation() {
        // p=1, g=0.5: m=(1-0.9)*0.5, v=(1-0.999)*0.25, bias correction
        // restores mhat=0.5, vhat=0.25, so the update is
        // lr*(0.5/(0.5+1e-8) + wd*1) and p lands at 0.899000002 (wd=0.01,
        // lr=0.1).
        let p = T::param(vec![1.0], &[1, 1]).unwrap();
        let loss = p.mul_scalar(0.5).sum_all();
        loss.backward().unwrap();
        let params: ParamList<f64> = vec![("p".into(), p.clone())];
        let mut opt = AdamW::new(&params);
        opt.apply(&params, 0.1, 0.01);
        let got = p.to_vec()[0];
        let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01);
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.899000002).abs() < 1e-12);
    }

    #[test]
    fn adamw_leaves_parameters_alone_without_gradient_pressure() {
        let p = T::param(vec![0.3, -1.7], &[1, 2]).unwrap();
        let before = p.to_vec();
        let params: ParamList<f64> = vec![("p".into(), p.clone())];
        let mut opt = AdamW::new(&params);
        // No gradient at all: skipped entirely.
        opt.apply(&params, 0.1, 0.0);
        assert_eq!(p.to_vec(), before);
        // Zero gradient, zero decay: update is exactly zero.
        p.ensure_zero_grad();
        opt.apply(&params, 0.1, 0.0);
        assert_eq!(p.to_vec(), before);
    }

    #[test]
    fn clipping_scales_exactly_and_bounds_the_norm() {
        let g34 = T::param(vec![0.0, 0.0], &[1, 2]).unwrap();
        g34.ensure_zero_grad();
        g34.with_grad_mut(|g| {
            g[0] = 3.0;
            g[1] = 4.0;
        });
        let params: ParamList<f64> = vec![("g".into(), g34.clone())];
        let scale = clip_gradients(&params, 1.0);
        assert!((scale - 0.2).abs() < 1e-15);
        let g = g34.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15);
        assert!((g[1] - 0.8).abs() < 1e-15);

        // Under the threshold: untouched, scale 1.
        let small = T::param(vec![0.0], &[1, 1]).unwrap();
        small.ensure_zero_grad();
        small.with_grad_mut(|g| g[0] = 0.5);
        let params: ParamList<f64> = vec![("s".into(), small.clone())];
        assert_eq!(clip_gradients(&params, 1.0), 1.0);
        assert_eq!(small.grad().unwrap()[0], 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(1..20);
            let t = T::param(vec![0.0; n], &[1, n]).unwrap();
            t.ensure_zero_grad();
            t.with_grad_mut(|g| {
                for v in g.iter_mut() {
                    *v = rng.gen_range(-3.0..3.0);
                }
            });
            let params: ParamList<f64> = vec![("t".into(), t.clone())];
            let max = rng.gen_range(0.1..2.0);
            clip_gradients(&params, max);
            let norm = t
                .grad()
                .unwrap()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!(norm <= max + 1e-12, "norm {norm} exceeds {max}");
        }
    }

    fn tiny_setup() -> (DmlModel<f64>, TrainConfig, Vec<TrainInstance>) {
        let corpus_cfg = CorpusConfig {
            images: 6,
            caps_per_image: 3,
            families: 4,
            d_img: 8,
            regions: 3,
            seed: 5,
        };
        let ds = generate_corpus(&corpus_cfg).unwrap();
        let vocab = Vocab::build(&ds.instances);
        let data = ds.training_view(&vocab);
        let model_cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            mode_enc_layers: 1,
            mode_dec_layers: 1,
            image_enc_layers: 1,
            caption_dec_layers: 1,
            max_len: 16,
            dropout: 0.0,
            k: 6,
            d_img: 8,
        };
        let cfg = TrainConfig {
            total_steps: 10,
            images_per_batch: 2,
            sampled_caps_per_image: 1,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 2,
            grad_clip_norm: 1.0,
            label_smoothing: 0.1,
            beta: 0.25,
            masking: MaskingStrategy::Full,
            assignment: AssignmentStrategy::Hungarian,
            seed: 3,
            preset: "tiny".into(),
            mode_conditioning: true,
            mic_updates_codebook: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DmlModel::init(vocab.len(), &model_cfg, &mut rng);
        (model, cfg, data)
    }

    fn param_bits(t: &Trainer<f64>) -> Vec<(String, Vec<u64>)> {
        t.params
            .iter()
            .map(|(n, p)| (n.clone(), p.to_vec().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn identical_seeds_give_bit_identical_parameters_after_ten_steps() {
        let run = || {
            let (model, cfg, data) = tiny_setup();
            let mut t = Trainer::new(model, cfg).unwrap();
            t.run(&data, None, None, 0).unwrap();
            t
        };
        let a = run();
        let b = run();
        assert_eq!(param_bits(&a), param_bits(&b));
        assert_eq!(a.usage.counts, b.usage.counts);
        assert_eq!(a.last_metrics, b.last_metrics);
    }

    #[test]
    fn loss_decomposition_matches_per_branch_recomputation() {
        let (model, cfg, data) = tiny_setup();
        let batch = batch_for_step(&data, 0, cfg.images_per_batch);
        let once = compute_step_losses(&model, &batch, 0, &cfg).unwrap();
        let again = compute_step_losses(&model, &batch, 0, &cfg).unwrap();
        let c1 = once.cdvae.as_ref().unwrap();
        let c2 = again.cdvae.as_ref().unwrap();
        assert_eq!(c1.loss.item(), c2.loss.item());
        assert_eq!(once.mic_loss.item(), again.mic_loss.item());
        // The sum really is its two parts: same addition, same order.
        assert_eq!(once.total.item(), c1.loss.item() + once.mic_loss.item());
        // And the per-branch pieces recompose the reported branch total.
        let recon = c1.recon_loss + c1.codebook_loss + cfg.beta * c1.commitment_loss;
        assert!((c1.loss.item() - recon).abs() < 1e-12);

        let mut trainer = Trainer::new(model, cfg).unwrap();
        let metrics = trainer.train_step(&batch).unwrap();
        assert_eq!(metrics.cdvae_loss, c1.recon_loss);
        assert_eq!(metrics.vq_loss, c1.codebook_loss);
        assert_eq!(metrics.commit_loss, c1.commitment_loss);
        assert_eq!(metrics.mic_loss, once.mic_loss.item());
    }

    #[test]
    fn reconstruction_branch_never_reaches_the_image_encoder() {
        let (model, cfg, data) = tiny_setup();
        for step in 0..3 {
            let batch = batch_for_step(&data, step, cfg.images_per_batch);
            let losses = compute_step_losses(&model, &batch, step, &cfg).unwrap();
            losses.cdvae.as_ref().unwrap().loss.backward().unwrap();
            let mut params = ParamList::new();
            model.mic.collect(&mut params);
            for (name, p) in &params {
                if name.starts_with("mic.image_proj") || name.starts_with("mic.enc") {
                    let contribution = p.grad().map_or(0.0, |g| g.iter().map(|v| v.abs()).sum());
                    assert_eq!(contribution, 0.0, "{name} received reconstruction gradient");
                }
            }
            for (_, p) in &model.collect() {
                p.clear_grad();
            }
        }
    }

    #[test]
    fn training_log_lines_carry_the_pinned_fields() {
        let (model, mut cfg, data) = tiny_setup();
        cfg.total_steps = 3;
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let mut buf: Vec<u8> = Vec::new();
        trainer.run(&data, Some(&mut buf), None, 0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for (i, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["step"], i);
            for key in ["cdvae_loss", "mic_loss", "vq_loss", "commit_loss", "lr"] {
                assert!(v[key].is_number(), "missing {key}");
            }
            assert!(v["effective_modes"].is_number());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let (model, mut cfg, data) = tiny_setup();
        cfg.total_steps = 4;
        let mut trainer = Trainer::new(model, cfg).unwrap();
        trainer.run(&data, None, None, 0).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        trainer.save_checkpoint(&dir).unwrap();
        let loaded = Trainer::<f64>::load_checkpoint(&dir).unwrap();
        assert_eq!(param_bits(&trainer), param_bits(&loaded));
        assert_eq!(trainer.step, loaded.step);
        assert_eq!(trainer.opt.t, loaded.opt.t);
        assert_eq!(trainer.usage.counts, loaded.usage.counts);
        assert_eq!(trainer.last_metrics, loaded.last_metrics);
        for i in 0..trainer.opt.m.len() {
            assert_eq!(trainer.opt.m[i], loaded.opt.m[i]);
            assert_eq!(trainer.opt.v[i], loaded.opt.v[i]);
        }
        // Same forward output from the restored model.
        let feats = features_tensor::<f64>(&data[0].features).unwrap();
        let mut rng: Option<&mut dyn RngCore> = None;
        let m1 = trainer.model.mic.encode_image(&feats, &mut rng).unwrap();
        let m2 = loaded.model.mic.encode_image(&feats, &mut rng).unwrap();
        assert_eq!(m1.to_vec(), m2.to_vec());
    }

    #[test]
    fn resuming_from_a_checkpoint_matches_the_uninterrupted_run() {
        let (model, mut cfg, data) = tiny_setup();
        cfg.total_steps = 6;
        let mut straight = Trainer::new(model, cfg.clone()).unwrap();
        straight.run(&data, None, None, 0).unwrap();

        let (model2, _, _) = tiny_setup();
        let mut first_half = Trainer::new(model2, cfg).unwrap();
        while first_half.step < 3 {
            let batch = batch_for_step(&data, first_half.step, first_half.cfg.images_per_batch);
            first_half.train_step(&batch).unwrap();
        }
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        first_half.save_checkpoint(&dir).unwrap();
        let mut resumed = Trainer::<f64>::load_checkpoint(&dir).unwrap();
        resumed.run(&data, None, None, 0).unwrap();
        assert_eq!(param_bits(&straight), param_bits(&resumed));
        assert_eq!(straight.usage.counts, resumed.usage.counts);
    }

    #[test]
    fn checkpoint_version_mismatch_is_surfaced() {
        let (model, cfg, _) = tiny_setup();
        let trainer = Trainer::new(model, cfg).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        trainer.save_checkpoint(&dir).unwrap();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&path, text).unwrap();
        let err = Trainer::<f64>::load_checkpoint(&dir).unwrap_err();
        assert!(matches!(err, TrainError::Format(_)), "got {err:?}");
        assert!(err.to_string().contains("format version 99"));
    }

    #[test]
    fn non_finite_loss_aborts_with_a_diagnostic_dump() {
        // A pathological beta blows the weighted commitment term up to
        // infinity, the kind of overflow the trainer-level guard exists for
        // (op-level guards catch NaN inputs much earlier). Infinity itself
        // is used so the blowup does not depend on the size of the
        // commitment term at the current init scales.
        let (model, mut cfg, data) = tiny_setup();
        cfg.beta = f64::INFINITY;
        let before = model.emb.tokens.to_vec();
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let batch = batch_for_step(&data, 0, trainer.cfg.images_per_batch);
        let err = trainer.train_step(&batch).unwrap_err();
        match err {
            TrainError::NonFinite { step, detail } => {
                assert_eq!(step, 0);
                assert!(detail.contains("recon"));
                assert!(detail.contains("mic"));
                assert!(detail.contains("inf"));
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
        // The abort happened before any parameter update.
        assert_eq!(trainer.model.emb.tokens.to_vec(), before);
    }

    #[test]
    fn batches_cycle_through_the_dataset_deterministically() {
        let (_, _, data) = tiny_setup();
        let b0 = batch_for_step(&data, 0, 4);
        let b1 = batch_for_step(&data, 1, 4);
        assert_eq!(b0[0].image_id, data[0].image_id);
        assert_eq!(b0[3].image_id, data[3].image_id);
        assert_eq!(b1[0].image_id, data[4].image_id);
        // Wraps around after the end.
        assert_eq!(b1[2].image_id, data[0].image_id);
    }

    #[test]
    fn no_mode_baseline_trains_without_touching_the_codebook() {
        let (model, mut cfg, data) = tiny_setup();
        cfg.mode_conditioning = false;
        cfg.total_steps = 2;
        let entries_before = model.codebook.entries.to_vec();
        let mut trainer = Trainer::new(model, cfg).unwrap();
        trainer.run(&data, None, None, 0).unwrap();
        assert_eq!(trainer.model.codebook.entries.to_vec(), entries_before);
        assert_eq!(trainer.usage.effective_modes(), 0);
        let m = trainer.last_metrics.as_ref().unwrap();
        assert_eq!(m.cdvae_loss, 0.0);
        assert_eq!(m.vq_loss, 0.0);
        assert!(m.mic_loss.is_finite() && m.mic_loss > 0.0);
    }
}
