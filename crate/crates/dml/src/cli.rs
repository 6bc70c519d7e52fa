//! Command-line surface: corpus generation, training, caption generation,
//! evaluation, and embedding projection. Every command prints its effective
//! configuration as JSON so a run is reproducible from its own output.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate_corpus, split_dataset, CorpusConfig, DataError, Dataset, Vocab};
use crate::linalg::Pca;
use crate::metrics::{
    adjusted_rand_index, bleu, div_n, mbleu, mode_purity, oracle_report, rouge_l, self_cider,
    sentence_score_matrix, CiderD,
};
use crate::mic::DecodeKind;
use crate::tensor::TensorError;
use crate::trainer::{
    features_tensor, DmlModel, ModelConfig, TrainConfig, TrainError, Trainer,
};
use crate::vq::AssignmentStrategy;
use crate::Real;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Tensor(_) | TrainError::Vq(_) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Io(_) | TrainError::Json(_) | TrainError::Format(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "dml",
    version,
    about = "Discrete mode learning for diverse image captioning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus: three JSONL splits plus vocab.json.
    Corpus(CorpusArgs),
    /// Train the joint model; writes checkpoints and a JSONL training log.
    Train(TrainArgs),
    /// Decode captions from a checkpoint, one JSON line per (image, mode).
    Generate(GenerateArgs),
    /// Score candidate captions against references.
    Evaluate(EvaluateArgs),
    /// Export a 2-D PCA of codebook entries and caption embeddings as CSV.
    Project(ProjectArgs),
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version arrive as "errors" but are successful output.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Corpus(a) => cmd_corpus(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Generate(a) => cmd_generate(&a),
        Cmd::Evaluate(a) => cmd_evaluate(&a),
        Cmd::Project(a) => cmd_project(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn echo_config<T: Serialize>(label: &str, cfg: &T) {
    match serde_json::to_string(cfg) {
        Ok(json) => println!("{label} {json}"),
        Err(e) => eprintln!("config echo failed: {e}"),
    }
}

// ---------------------------------------------------------------- corpus --

#[derive(Args, Debug, Serialize)]
pub struct CorpusArgs {
    /// Number of images.
    #[arg(long, default_value_t = 2000)]
    pub images: usize,
    /// Captions per image.
    #[arg(long, default_value_t = 5)]
    pub caps: usize,
    /// Template families to draw from (at most 8).
    #[arg(long, default_value_t = 8)]
    pub families: usize,
    /// Region feature width.
    #[arg(long, default_value_t = 32)]
    pub d_img: usize,
    /// Regions per image.
    #[arg(long, default_value_t = 6)]
    pub regions: usize,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Fraction of images held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    /// Fraction of images held out for testing.
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_corpus(args: &CorpusArgs) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&args.val_frac)
        || !(0.0..1.0).contains(&args.test_frac)
        || args.val_frac + args.test_frac >= 1.0
    {
        return Err(CliError::Usage(
            "val_frac and test_frac must be nonnegative and sum below 1".into(),
        ));
    }
    let cfg = CorpusConfig {
        images: args.images,
        caps_per_image: args.caps,
        families: args.families,
        d_img: args.d_img,
        regions: args.regions,
        seed: args.seed,
    };
    echo_config("effective-config", args);
    let ds = generate_corpus(&cfg)?;
    let vocab = Vocab::build(&ds.instances);
    let (train, val, test) = split_dataset(&ds, args.val_frac, args.test_frac, args.seed);
    fs::create_dir_all(&args.out)?;
    train.save_jsonl(&args.out.join("train.jsonl"))?;
    val.save_jsonl(&args.out.join("val.jsonl"))?;
    test.save_jsonl(&args.out.join("test.jsonl"))?;
    vocab.save(&args.out.join("vocab.json"))?;
    println!(
        "wrote {} train / {} val / {} test images, vocabulary of {} tokens, to {}",
        train.instances.len(),
        val.instances.len(),
        test.instances.len(),
        vocab.len(),
        args.out.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- train --

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding train.jsonl and vocab.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset for model size and schedule.
    #[arg(long, value_parser = ["paper", "desk"])]
    pub preset: Option<String>,
    /// Mode assignment strategy.
    #[arg(long, value_parser = parse_assign)]
    pub assign: Option<AssignmentStrategy>,
    /// Masking schedule: full, fixed:P, or linear:A:B.
    #[arg(long, value_parser = parse_mask)]
    pub mask: Option<crate::cdvae::MaskingStrategy>,
    /// Codebook size.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Captions per image for the captioning branch.
    #[arg(long)]
    pub sampled_caps: Option<usize>,
    /// Train the no-mode baseline (captioner only, zero mode vector).
    #[arg(long)]
    pub no_modes: bool,
    /// Checkpoint cadence in steps (0 = final checkpoint only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Resume from this checkpoint directory under its recorded config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Optional keys of the train config file; unknown keys are rejected.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    preset: Option<String>,
    model: Option<ModelConfig>,
    total_steps: Option<usize>,
    images_per_batch: Option<usize>,
    sampled_caps_per_image: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    warmup_steps: Option<usize>,
    grad_clip_norm: Option<f64>,
    label_smoothing: Option<f64>,
    beta: Option<f64>,
    masking: Option<crate::cdvae::MaskingStrategy>,
    assignment: Option<AssignmentStrategy>,
    seed: Option<u64>,
    k: Option<usize>,
    mode_conditioning: Option<bool>,
    mic_updates_codebook: Option<bool>,
}

/// The fully merged configuration a training run executes under.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn resolve_run_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let file: ConfigFile = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let preset = args
        .preset
        .clone()
        .or(file.preset.clone())
        .unwrap_or_else(|| "desk".into());
    let (mut model, mut train) = match preset.as_str() {
        "paper" => (ModelConfig::paper(), TrainConfig::paper()),
        "desk" => (ModelConfig::desk(), TrainConfig::desk()),
        other => return Err(CliError::Usage(format!("unknown preset {other}"))),
    };
    train.preset = preset;
    if let Some(m) = file.model {
        model = m;
    }
    macro_rules! merge {
        ($($field:ident),*) => {
            $(if let Some(v) = file.$field { train.$field = v; })*
        };
    }
    merge!(
        total_steps,
        images_per_batch,
        sampled_caps_per_image,
        learning_rate,
        weight_decay,
        warmup_steps,
        grad_clip_norm,
        label_smoothing,
        beta,
        masking,
        assignment,
        seed,
        mode_conditioning,
        mic_updates_codebook
    );
    if let Some(k) = file.k {
        model.k = k;
    }
    // Flags win over everything.
    if let Some(v) = args.assign {
        train.assignment = v;
    }
    if let Some(v) = args.mask {
        train.masking = v;
    }
    if let Some(v) = args.k {
        model.k = v;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.steps {
        train.total_steps = v;
    }
    if let Some(v) = args.sampled_caps {
        train.sampled_caps_per_image = v;
    }
    if args.no_modes {
        train.mode_conditioning = false;
    }
    Ok(RunConfig { model, train })
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let vocab = Vocab::load(&args.data.join("vocab.json"))?;
    let ds = Dataset::load_jsonl(&args.data.join("train.jsonl"))?;
    let data = ds.training_view(&vocab);

    let mut trainer: Trainer<Real> = match &args.resume {
        Some(ckpt) => {
            if args.config.is_some() || args.preset.is_some() {
                return Err(CliError::Usage(
                    "--resume continues under the checkpoint's recorded configuration; \
                     drop --config/--preset"
                        .into(),
                ));
            }
            Trainer::load_checkpoint(ckpt)?
        }
        None => {
            let run = resolve_run_config(args)?;
            let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
            let model = DmlModel::init(vocab.len(), &run.model, &mut rng);
            Trainer::new(model, run.train)?
        }
    };
    echo_config(
        "effective-config",
        &RunConfig {
            model: trainer.model.cfg.clone(),
            train: trainer.cfg.clone(),
        },
    );

    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .write(true)
        .open(&log_path)?;
    let mut log = BufWriter::new(log_file);
    let periodic = args.out.join("checkpoint");
    trainer.run(
        &data,
        Some(&mut log as &mut dyn Write),
        if args.checkpoint_every > 0 {
            Some(periodic.as_path())
        } else {
            None
        },
        args.checkpoint_every,
    )?;
    log.flush()?;
    if args.checkpoint_every > 0 {
        vocab.save(&periodic.join("vocab.json"))?;
    }
    let final_dir = args.out.join("final");
    trainer.save_checkpoint(&final_dir)?;
    vocab.save(&final_dir.join("vocab.json"))?;
    let m = trainer.last_metrics.as_ref();
    println!(
        "finished at step {}: cdvae {:.4}, mic {:.4}, {} effective modes; checkpoint {}",
        trainer.step,
        m.map_or(f64::NAN, |m| m.cdvae_loss),
        m.map_or(f64::NAN, |m| m.mic_loss),
        trainer.usage.effective_modes(),
        final_dir.display()
    );
    Ok(())
}

// -------------------------------------------------------------- generate --

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    /// Checkpoint directory (for example run1/final).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSONL split providing image features (for example data/test.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    /// Modes to decode: "all" (every effective mode) or a list like "3,7".
    #[arg(long, default_value = "all")]
    pub modes: String,
    /// Decoder: "greedy" or "beam:WIDTH".
    #[arg(long, default_value = "greedy", value_parser = parse_decode)]
    pub decode: DecodeKind,
    /// Length-normalization exponent for ranking beam hypotheses.
    #[arg(long, default_value_t = 0.0)]
    pub length_norm: f64,
}

/// One generated caption, one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub image_id: String,
    pub mode: usize,
    pub caption: String,
    pub logprob: f64,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let trainer: Trainer<Real> = Trainer::load_checkpoint(&args.ckpt)?;
    let vocab = Vocab::load(&args.ckpt.join("vocab.json"))?;
    let ds = Dataset::load_jsonl(&args.data)?;
    let data = ds.training_view(&vocab);
    let model = &trainer.model;
    let max_len = model.cfg.max_len - 1;

    let conditioned = trainer.cfg.mode_conditioning;
    let modes: Vec<usize> = if !conditioned {
        Vec::new()
    } else {
        match parse_modes(&args.modes)? {
            Some(listed) => {
                if let Some(&bad) = listed.iter().find(|&&m| m >= model.codebook.len()) {
                    return Err(CliError::Usage(format!(
                        "mode {bad} is out of range for a codebook of {}",
                        model.codebook.len()
                    )));
                }
                listed
            }
            None => {
                let effective: Vec<usize> = trainer
                    .usage
                    .counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(i, _)| i)
                    .collect();
                if effective.is_empty() {
                    return Err(CliError::Data(
                        "checkpoint has no effective modes; was it trained?".into(),
                    ));
                }
                effective
            }
        }
    };
    echo_config("effective-config", args);

    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(File::create(&args.out)?);
    let mut written = 0usize;
    for inst in &data {
        let feats = features_tensor::<Real>(&inst.features)?;
        if conditioned {
            let caps = model.mic.generate_modes(
                &model.emb,
                &model.codebook,
                &feats,
                &modes,
                args.decode,
                args.length_norm,
                max_len,
            )?;
            for c in caps {
                let record = GenerationRecord {
                    image_id: inst.image_id.clone(),
                    mode: c.mode,
                    caption: vocab.decode(&c.tokens),
                    logprob: c.logprob,
                };
                serde_json::to_writer(&mut out, &record)
                    .map_err(|e| CliError::Data(e.to_string()))?;
                writeln!(out)?;
                written += 1;
            }
        } else {
            let mut rng: Option<&mut dyn rand::RngCore> = None;
            let memory = model.mic.encode_image(&feats, &mut rng)?;
            let zero = crate::Tensor::from_vec(
                vec![0.0; model.cfg.d_model],
                &[1, model.cfg.d_model],
            )?;
            let d = model.mic.decode_with_vector(
                &model.emb,
                &zero,
                &memory,
                args.decode,
                args.length_norm,
                max_len,
            )?;
            let record = GenerationRecord {
                image_id: inst.image_id.clone(),
                mode: 0,
                caption: vocab.decode(&d.tokens),
                logprob: d.logprob,
            };
            serde_json::to_writer(&mut out, &record).map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(out)?;
            written += 1;
        }
    }
    out.flush()?;
    println!(
        "wrote {written} captions for {} images to {}",
        data.len(),
        args.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------- evaluate --

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Candidate captions JSONL (from `generate`).
    #[arg(long)]
    pub candidates: PathBuf,
    /// Reference split JSONL covering the same image ids.
    #[arg(long)]
    pub references: PathBuf,
    /// Vocabulary used for tokenization.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Report destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Add mode purity against the generator's family labels
    /// (needs --ckpt and labels in the references).
    #[arg(long)]
    pub purity: bool,
    /// Checkpoint whose mode encoder scores purity assignments.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct OracleBlock {
    pub oracle: f64,
    pub per_mode: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct MetricsReport {
    pub images: usize,
    pub modes: Vec<usize>,
    pub bleu4: OracleBlock,
    pub rouge_l: OracleBlock,
    pub cider_d: OracleBlock,
    pub div_1: f64,
    pub div_2: f64,
    pub mbleu_4: f64,
    pub self_cider: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_purity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted_rand_index: Option<f64>,
}

fn load_candidates(path: &Path) -> Result<Vec<GenerationRecord>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("candidates {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("candidates line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(CliError::Data("candidates file is empty".into()));
    }
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    echo_config("effective-config", args);
    let vocab = Vocab::load(&args.vocab)?;
    let refs_ds = Dataset::load_jsonl(&args.references)?;
    let candidates = load_candidates(&args.candidates)?;

    let ref_ids: BTreeSet<&str> = refs_ds
        .instances
        .iter()
        .map(|i| i.image_id.as_str())
        .collect();
    let cand_ids: BTreeSet<&str> = candidates.iter().map(|c| c.image_id.as_str()).collect();
    if ref_ids != cand_ids {
        let missing: Vec<&&str> = ref_ids.difference(&cand_ids).take(5).collect();
        let extra: Vec<&&str> = cand_ids.difference(&ref_ids).take(5).collect();
        return Err(CliError::Data(format!(
            "candidate/reference image ids mismatch (missing {missing:?}, unexpected {extra:?})"
        )));
    }

    // Group candidates per image, ordered by mode index.
    let mut by_image: BTreeMap<&str, Vec<(usize, Vec<usize>)>> = BTreeMap::new();
    for c in &candidates {
        by_image
            .entry(c.image_id.as_str())
            .or_default()
            .push((c.mode, vocab.encode(&c.caption)));
    }
    for caps in by_image.values_mut() {
        caps.sort_by_key(|(m, _)| *m);
    }
    let mode_set: Vec<usize> = by_image
        .values()
        .next()
        .map(|caps| caps.iter().map(|(m, _)| *m).collect())
        .unwrap_or_default();
    for caps in by_image.values() {
        let modes: Vec<usize> = caps.iter().map(|(m, _)| *m).collect();
        if modes != mode_set {
            return Err(CliError::Data(
                "every image needs candidates for the same set of modes".into(),
            ));
        }
    }

    // Reference order drives the matrices.
    let mut gens: Vec<Vec<Vec<usize>>> = Vec::with_capacity(refs_ds.instances.len());
    let mut refs: Vec<Vec<Vec<usize>>> = Vec::with_capacity(refs_ds.instances.len());
    for inst in &refs_ds.instances {
        refs.push(inst.captions.iter().map(|c| vocab.encode(c)).collect());
        gens.push(
            by_image[inst.image_id.as_str()]
                .iter()
                .map(|(_, toks)| toks.clone())
                .collect(),
        );
    }

    let cider = CiderD::fit(&refs);
    let bleu_scores = sentence_score_matrix(|c, r| bleu(c, r, 4), &gens, &refs);
    let rouge_scores = sentence_score_matrix(rouge_l, &gens, &refs);
    let cider_scores = sentence_score_matrix(|c, r| cider.sentence(c, r), &gens, &refs);
    let block = |scores: &[Vec<f64>]| {
        let r = oracle_report(scores);
        OracleBlock {
            oracle: r.oracle,
            per_mode: r.per_mode,
        }
    };
    let mean = |f: &dyn Fn(&[Vec<usize>]) -> f64| {
        gens.iter().map(|g| f(g)).sum::<f64>() / gens.len() as f64
    };

    let (purity, ari) = if args.purity {
        let ckpt = args.ckpt.as_ref().ok_or_else(|| {
            CliError::Usage("--purity needs --ckpt for the mode encoder".into())
        })?;
        let trainer: Trainer<Real> = Trainer::load_checkpoint(ckpt)?;
        let mut assigned = Vec::new();
        let mut labels = Vec::new();
        for inst in &refs_ds.instances {
            let fam = inst.mode_labels.as_ref().ok_or_else(|| {
                CliError::Data("references carry no mode labels; purity is undefined".into())
            })?;
            let caps: Vec<Vec<usize>> = inst.captions.iter().map(|c| vocab.encode(c)).collect();
            let a = trainer.model.assign_modes(&caps, trainer.cfg.assignment)?;
            assigned.extend(a);
            labels.extend_from_slice(fam);
        }
        (
            Some(mode_purity(&assigned, &labels)),
            Some(adjusted_rand_index(&assigned, &labels)),
        )
    } else {
        (None, None)
    };

    let report = MetricsReport {
        images: refs_ds.instances.len(),
        modes: mode_set,
        bleu4: block(&bleu_scores),
        rouge_l: block(&rouge_scores),
        cider_d: block(&cider_scores),
        div_1: mean(&|g| div_n(g, 1)),
        div_2: mean(&|g| div_n(g, 2)),
        mbleu_4: mean(&|g| mbleu(g)),
        self_cider: mean(&|g| self_cider(g)),
        mode_purity: purity,
        adjusted_rand_index: ari,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    match &args.out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir)?;
                }
            }
            fs::write(path, json + "\n")?;
            println!("report written to {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

// --------------------------------------------------------------- project --

#[derive(Args, Debug, Serialize)]
pub struct ProjectArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSONL split providing captions to embed.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_project(args: &ProjectArgs) -> Result<(), CliError> {
    echo_config("effective-config", args);
    let trainer: Trainer<Real> = Trainer::load_checkpoint(&args.ckpt)?;
    let vocab = Vocab::load(&args.ckpt.join("vocab.json"))?;
    let ds = Dataset::load_jsonl(&args.data)?;
    let data = ds.training_view(&vocab);
    let model = &trainer.model;

    let active: Vec<usize> = trainer
        .usage
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        return Err(CliError::Data(
            "checkpoint has no effective modes to project".into(),
        ));
    }

    let d = model.cfg.d_model;
    let entries = model.codebook.entries.to_vec();
    let mut rows: Vec<Vec<f64>> = active
        .iter()
        .map(|&k| entries[k * d..(k + 1) * d].to_vec())
        .collect();
    // (assigned mode, embedding) per caption.
    let mut caption_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for inst in &data {
        let assignment = model.assign_modes(&inst.captions, trainer.cfg.assignment)?;
        for (cap, &mode) in inst.captions.iter().zip(&assignment) {
            let mut rng: Option<&mut dyn rand::RngCore> = None;
            let e = model.cdvae.encode_mode(&model.emb, cap, &mut rng)?;
            caption_rows.push((mode, e.to_vec()));
        }
    }
    rows.extend(caption_rows.iter().map(|(_, r)| r.clone()));
    // One basis for both kinds of points.
    let pca = Pca::fit(&rows, d, 2);

    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(File::create(&args.out)?);
    writeln!(out, "kind,mode_index,x,y")?;
    for (&k, row) in active.iter().zip(&rows) {
        let p = pca.project(row);
        writeln!(out, "mode,{k},{},{}", p[0], p[1])?;
    }
    for (mode, row) in &caption_rows {
        let p = pca.project(row);
        writeln!(out, "caption,{mode},{},{}", p[0], p[1])?;
    }
    out.flush()?;
    println!(
        "projected {} modes and {} captions to {}",
        active.len(),
        caption_rows.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- parsing --

fn parse_assign(s: &str) -> Result<AssignmentStrategy, String> {
    match s {
        "hungarian" => Ok(AssignmentStrategy::Hungarian),
        "nearest" => Ok(AssignmentStrategy::Nearest),
        other => Err(format!("expected hungarian or nearest, got {other}")),
    }
}

fn parse_mask(s: &str) -> Result<crate::cdvae::MaskingStrategy, String> {
    use crate::cdvae::MaskingStrategy as M;
    if s == "full" {
        return Ok(M::Full);
    }
    if let Some(rest) = s.strip_prefix("fixed:") {
        let prob: f64 = rest
            .parse()
            .map_err(|_| format!("bad masking probability {rest}"))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err("masking probability must lie in [0, 1]".into());
        }
        return Ok(M::FixedProb { prob });
    }
    if let Some(rest) = s.strip_prefix("linear:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() == 2 {
            let start: f64 = parts[0]
                .parse()
                .map_err(|_| format!("bad ramp start {}", parts[0]))?;
            let end: f64 = parts[1]
                .parse()
                .map_err(|_| format!("bad ramp end {}", parts[1]))?;
            for v in [start, end] {
                if !(0.0..=1.0).contains(&v) {
                    return Err("ramp endpoints must lie in [0, 1]".into());
                }
            }
            return Ok(M::LinearRamp { start, end });
        }
    }
    Err(format!("expected full, fixed:P, or linear:A:B, got {s}"))
}

fn parse_decode(s: &str) -> Result<DecodeKind, String> {
    if s == "greedy" {
        return Ok(DecodeKind::Greedy);
    }
    if let Some(rest) = s.strip_prefix("beam:") {
        let width: usize = rest.parse().map_err(|_| format!("bad beam width {rest}"))?;
        if width == 0 {
            return Err("beam width must be at least 1".into());
        }
        return Ok(DecodeKind::Beam { width });
    }
    Err(format!("expected greedy or beam:WIDTH, got {s}"))
}

/// "all" becomes None; otherwise a comma-separated index list.
fn parse_modes(s: &str) -> Result<Option<Vec<usize>>, CliError> {
    if s == "all" {
        return Ok(None);
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let ix: usize = part
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad mode index {part}")))?;
        out.push(ix);
    }
    if out.is_empty() {
        return Err(CliError::Usage("mode list is empty".into()));
    }
    out.sort_unstable();
    out.dedup();
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdvae::MaskingStrategy as M;

    #[test]
    fn mask_flag_grammar_round_trips() {
        assert_eq!(parse_mask("full").unwrap(), M::Full);
        assert_eq!(parse_mask("fixed:0.5").unwrap(), M::FixedProb { prob: 0.5 });
        assert_eq!(
            parse_mask("linear:1.0:0.0").unwrap(),
            M::LinearRamp {
                start: 1.0,
                end: 0.0
            }
        );
        assert!(parse_mask("fixed:1.5").is_err());
        assert!(parse_mask("linear:1.0").is_err());
        assert!(parse_mask("sometimes").is_err());
    }

    #[test]
    fn decode_flag_grammar_round_trips() {
        assert_eq!(parse_decode("greedy").unwrap(), DecodeKind::Greedy);
        assert_eq!(parse_decode("beam:3").unwrap(), DecodeKind::Beam { width: 3 });
        assert!(parse_decode("beam:0").is_err());
        assert!(parse_decode("beam:x").is_err());
        assert!(parse_decode("sampled").is_err());
    }

    #[test]
    fn mode_list_parses_sorts_and_dedups() {
        assert_eq!(parse_modes("all").unwrap(), None);
        assert_eq!(parse_modes("7,3,3").unwrap(), Some(vec![3, 7]));
        assert!(parse_modes("3,x").is_err());
        assert!(parse_modes("").is_err());
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Data("x".into()).exit_code(), 3);
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 4);
        let infeasible: CliError = DataError::BadConfig("families".into()).into();
        assert_eq!(infeasible.exit_code(), 2);
        let nan: CliError = TrainError::NonFinite {
            step: 3,
            detail: "inf".into(),
        }
        .into();
        assert_eq!(nan.exit_code(), 4);
    }

    #[test]
    fn config_file_values_override_preset_and_flags_override_both() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.json");
        fs::write(
            &cfg_path,
            r#"{"preset":"desk","total_steps":77,"seed":5,"k":9,"masking":{"kind":"fixed_prob","prob":0.5}}"#,
        )
        .unwrap();
        let args = TrainArgs {
            data: PathBuf::new(),
            out: PathBuf::new(),
            config: Some(cfg_path.clone()),
            preset: None,
            assign: None,
            mask: None,
            k: Some(11),
            seed: None,
            steps: None,
            sampled_caps: None,
            no_modes: false,
            checkpoint_every: 0,
            resume: None,
        };
        let run = resolve_run_config(&args).unwrap();
        assert_eq!(run.train.total_steps, 77);
        assert_eq!(run.train.seed, 5);
        assert_eq!(run.train.masking, M::FixedProb { prob: 0.5 });
        // The flag wins over the file's k.
        assert_eq!(run.model.k, 11);
        assert_eq!(run.train.preset, "desk");

        // Unknown keys are rejected.
        fs::write(&cfg_path, r#"{"total_steps":5,"learning_rte":0.1}"#).unwrap();
        let args = TrainArgs {
            config: Some(cfg_path),
            k: None,
            ..args
        };
        let err = resolve_run_config(&args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("learning_rte"));
    }

    #[test]
    fn pipeline_smoke_corpus_train_generate_evaluate_project() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let run_dir = dir.path().join("run");

        cmd_corpus(&CorpusArgs {
            images: 8,
            caps: 2,
            families: 3,
            d_img: 8,
            regions: 2,
            seed: 11,
            val_frac: 0.125,
            test_frac: 0.25,
            out: data_dir.clone(),
        })
        .unwrap();
        for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"] {
            assert!(data_dir.join(f).exists(), "missing {f}");
        }

        let cfg_path = dir.path().join("tiny.json");
        fs::write(
            &cfg_path,
            r#"{
              "model": {"d_model": 16, "n_heads": 2, "d_ff": 32,
                        "mode_enc_layers": 1, "mode_dec_layers": 1,
                        "image_enc_layers": 1, "caption_dec_layers": 1,
                        "max_len": 16, "dropout": 0.0, "k": 4, "d_img": 8},
              "total_steps": 6, "images_per_batch": 2, "warmup_steps": 2
            }"#,
        )
        .unwrap();
        cmd_train(&TrainArgs {
            data: data_dir.clone(),
            out: run_dir.clone(),
            config: Some(cfg_path),
            preset: None,
            assign: None,
            mask: None,
            k: None,
            seed: Some(4),
            steps: None,
            sampled_caps: None,
            no_modes: false,
            checkpoint_every: 0,
            resume: None,
        })
        .unwrap();
        let ckpt = run_dir.join("final");
        assert!(ckpt.join("manifest.json").exists());
        assert!(ckpt.join("tensors.bin").exists());
        assert!(ckpt.join("vocab.json").exists());
        assert!(run_dir.join("train_log.jsonl").exists());

        let gen_path = run_dir.join("gen.jsonl");
        cmd_generate(&GenerateArgs {
            ckpt: ckpt.clone(),
            data: data_dir.join("test.jsonl"),
            out: gen_path.clone(),
            modes: "all".into(),
            decode: DecodeKind::Greedy,
            length_norm: 0.0,
        })
        .unwrap();
        let recs = load_candidates(&gen_path).unwrap();
        assert!(!recs.is_empty());

        let report_path = run_dir.join("report.json");
        cmd_evaluate(&EvaluateArgs {
            candidates: gen_path.clone(),
            references: data_dir.join("test.jsonl"),
            vocab: data_dir.join("vocab.json"),
            out: Some(report_path.clone()),
            purity: true,
            ckpt: Some(ckpt.clone()),
        })
        .unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
        assert!(report["cider_d"]["oracle"].is_number());
        assert!(report["mode_purity"].is_number());

        // Mismatched image sets are a data error (exit 3).
        let err = cmd_evaluate(&EvaluateArgs {
            candidates: gen_path.clone(),
            references: data_dir.join("train.jsonl"),
            vocab: data_dir.join("vocab.json"),
            out: None,
            purity: false,
            ckpt: None,
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);

        let csv_path = run_dir.join("proj.csv");
        cmd_project(&ProjectArgs {
            ckpt,
            data: data_dir.join("test.jsonl"),
            out: csv_path.clone(),
        })
        .unwrap();
        let csv = fs::read_to_string(&csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "kind,mode_index,x,y");
        assert!(csv.lines().any(|l| l.starts_with("mode,")));
        assert!(csv.lines().any(|l| l.starts_with("caption,")));

        // Infeasible corpus shapes are usage errors (exit 2).
        let err = cmd_corpus(&CorpusArgs {
            images: 4,
            caps: 5,
            families: 3,
            d_img: 8,
            regions: 2,
            seed: 1,
            val_frac: 0.1,
            test_frac: 0.1,
            out: dir.path().join("bad"),
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn corpus_reruns_with_one_seed_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str| {
            let out = dir.path().join(name);
            cmd_corpus(&CorpusArgs {
                images: 10,
                caps: 3,
                families: 4,
                d_img: 8,
                regions: 2,
                seed: 23,
                val_frac: 0.1,
                test_frac: 0.1,
                out: out.clone(),
            })
            .unwrap();
            out
        };
        let a = mk("a");
        let b = mk("b");
        for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"] {
            let x = fs::read(a.join(f)).unwrap();
            let y = fs::read(b.join(f)).unwrap();
            assert_eq!(x, y, "{f} differs between identical seeds");
        }
    }
}
