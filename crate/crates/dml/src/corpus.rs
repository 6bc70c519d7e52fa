//! Synthetic mode-structured captioning corpus, JSONL ingestion, vocabulary.
//!
//! Every image is a small "scene" (object, color, setting) rendered into
//! region feature vectors, plus several captions drawn from distinct caption
//! families. A family is a sentence style with its own function words, so a
//! caption's family is recoverable from surface form, while its content words
//! are pinned by the scene. Family labels ride along for evaluation only:
//! the training view ([`TrainInstance`]) has no label field at all.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("corpus config: {0}")]
    BadConfig(String),
    #[error("vocabulary does not contain the special token layout it was built with")]
    VocabLayout,
}

pub const OBJECTS: [&str; 12] = [
    "dog", "cat", "bird", "horse", "boat", "car", "truck", "bike", "house", "tree", "flower",
    "chair",
];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "black", "white", "brown", "orange",
];
pub const SETTINGS: [&str; 10] = [
    "park", "street", "field", "beach", "forest", "kitchen", "garden", "harbor", "mountain",
    "yard",
];
const ADJECTIVES: [&str; 8] = [
    "bright", "calm", "fresh", "sunny", "dark", "pale", "warm", "vivid",
];

/// Number of distinct caption families the generator can produce.
pub const MAX_FAMILIES: usize = 8;

fn render_caption(family: usize, object: &str, color: &str, setting: &str) -> String {
    let adj = ADJECTIVES[COLORS.iter().position(|&c| c == color).unwrap_or(0)];
    match family {
        0 => format!("a {color} {object} in the {setting}"),
        1 => format!("the {object} looks {adj} near the {setting}"),
        2 => format!("there is a {color} {object} by the {setting}"),
        3 => format!("one {object} with {color} tones at the {setting}"),
        4 => format!("you can see a {object} around the {setting}"),
        5 => format!("photo of a {color} {object} inside the {setting}"),
        6 => format!("a small {object} resting on the {setting}"),
        7 => format!("the {color} {object} stands under the {setting} sky"),
        _ => unreachable!("family index validated at config time"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub images: usize,
    pub caps_per_image: usize,
    pub families: usize,
    pub d_img: usize,
    pub regions: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            images: 2000,
            caps_per_image: 5,
            families: 8,
            d_img: 32,
            regions: 6,
            seed: 17,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.images == 0 {
            return Err(DataError::BadConfig("images must be positive".into()));
        }
        if self.families == 0 || self.families > MAX_FAMILIES {
            return Err(DataError::BadConfig(format!(
                "families must be in 1..={MAX_FAMILIES}"
            )));
        }
        if self.caps_per_image == 0 || self.caps_per_image > self.families {
            return Err(DataError::BadConfig(
                "caps_per_image must be in 1..=families (one caption per distinct family)".into(),
            ));
        }
        if self.d_img == 0 || self.regions == 0 {
            return Err(DataError::BadConfig(
                "d_img and regions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One image with its captions; `mode_labels` (the caption families) exist
/// for evaluation and are stripped before anything reaches the trainer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneInstance {
    pub image_id: String,
    pub features: Vec<Vec<f64>>,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_labels: Option<Vec<usize>>,
}

/// Label-free, tokenized view used by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInstance {
    pub image_id: String,
    pub features: Vec<Vec<f64>>,
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub instances: Vec<SceneInstance>,
}

impl Dataset {
    pub fn load_jsonl(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut instances = Vec::new();
        let mut expect: Option<(usize, usize, usize)> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let inst: SceneInstance =
                serde_json::from_str(&line).map_err(|e| DataError::Schema {
                    line: lineno + 1,
                    detail: e.to_string(),
                })?;
            let r = inst.features.len();
            let d = inst.features.first().map_or(0, |f| f.len());
            if r == 0 || d == 0 || inst.features.iter().any(|f| f.len() != d) {
                return Err(DataError::Schema {
                    line: lineno + 1,
                    detail: "features must be a non-empty rectangular matrix".into(),
                });
            }
            if inst.captions.is_empty() {
                return Err(DataError::Schema {
                    line: lineno + 1,
                    detail: "at least one caption required".into(),
                });
            }
            if let Some(labels) = &inst.mode_labels {
                if labels.len() != inst.captions.len() {
                    return Err(DataError::Schema {
                        line: lineno + 1,
                        detail: "mode_labels length must match captions".into(),
                    });
                }
            }
            let shape = (r, d, inst.captions.len());
            if let Some(e) = expect {
                if e != shape {
                    return Err(DataError::Schema {
                        line: lineno + 1,
                        detail: format!(
                            "inconsistent shape {:?}, expected {:?} from earlier lines",
                            shape, e
                        ),
                    });
                }
            } else {
                expect = Some(shape);
            }
            instances.push(inst);
        }
        if instances.is_empty() {
            return Err(DataError::Schema {
                line: 0,
                detail: "empty corpus".into(),
            });
        }
        Ok(Self { instances })
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        for inst in &self.instances {
            let line = serde_json::to_string(inst).expect("instances serialize");
            writeln!(w, "{line}").map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }

    /// Strip labels and tokenize captions for the trainer.
    pub fn training_view(&self, vocab: &Vocab) -> Vec<TrainInstance> {
        self.instances
            .iter()
            .map(|inst| TrainInstance {
                image_id: inst.image_id.clone(),
                features: inst.features.clone(),
                captions: inst.captions.iter().map(|c| vocab.encode(c)).collect(),
            })
            .collect()
    }
}

/// Deterministic scene corpus. Region 0 leans on the object vector, region 1
/// on the color, region 2 on the setting, the rest mix all three, each plus
/// small iid noise. Captions come from `caps_per_image` distinct families.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..cfg.d_img).map(|_| unit.sample(rng)).collect())
            .collect()
    };
    let object_vecs = draw(&mut rng, OBJECTS.len());
    let color_vecs = draw(&mut rng, COLORS.len());
    let setting_vecs = draw(&mut rng, SETTINGS.len());

    let mut instances = Vec::with_capacity(cfg.images);
    let mut families: Vec<usize> = (0..cfg.families).collect();
    for i in 0..cfg.images {
        let o = rng.gen_range(0..OBJECTS.len());
        let c = rng.gen_range(0..COLORS.len());
        let s = rng.gen_range(0..SETTINGS.len());
        let mut features = Vec::with_capacity(cfg.regions);
        for region in 0..cfg.regions {
            let (wo, wc, ws) = match region {
                0 => (1.0, 0.2, 0.2),
                1 => (0.2, 1.0, 0.2),
                2 => (0.2, 0.2, 1.0),
                _ => (0.6, 0.6, 0.6),
            };
            let row: Vec<f64> = (0..cfg.d_img)
                .map(|j| {
                    wo * object_vecs[o][j]
                        + wc * color_vecs[c][j]
                        + ws * setting_vecs[s][j]
                        + noise.sample(&mut rng)
                })
                .collect();
            features.push(row);
        }
        families.shuffle(&mut rng);
        let mut chosen: Vec<usize> = families[..cfg.caps_per_image].to_vec();
        chosen.sort_unstable();
        let captions: Vec<String> = chosen
            .iter()
            .map(|&f| render_caption(f, OBJECTS[o], COLORS[c], SETTINGS[s]))
            .collect();
        instances.push(SceneInstance {
            image_id: format!("img_{i:06}"),
            features,
            captions,
            mode_labels: Some(chosen),
        });
    }
    Ok(Dataset { instances })
}

/// Deterministic train/val/test split by shuffling indices with the seed.
pub fn split_dataset(
    ds: &Dataset,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> (Dataset, Dataset, Dataset) {
    let n = ds.instances.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * val_frac).floor() as usize;
    let n_test = ((n as f64) * test_frac).floor() as usize;
    let pick = |ix: &[usize]| Dataset {
        instances: {
            let mut sorted: Vec<usize> = ix.to_vec();
            sorted.sort_unstable();
            sorted.iter().map(|&i| ds.instances[i].clone()).collect()
        },
    };
    let val = pick(&order[..n_val]);
    let test = pick(&order[n_val..n_val + n_test]);
    let train = pick(&order[n_val + n_test..]);
    (train, val, test)
}

/// Whitespace tokenizer vocabulary with fixed special-token slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    pub const MASK: usize = 4;
    pub const MODE: usize = 5;
    pub const SPECIALS: [&'static str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]", "[MODE]"];

    /// Build from captions: specials first, then words by descending
    /// frequency with alphabetical ties, so the layout is deterministic.
    pub fn build(instances: &[SceneInstance]) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for inst in instances {
            for cap in &inst.captions {
                for tok in cap.split_whitespace() {
                    *counts.entry(tok.to_string()).or_insert(0) += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|(w, _)| w));
        Self::from_tokens(tokens).expect("constructed layout is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < Self::SPECIALS.len()
            || Self::SPECIALS
                .iter()
                .enumerate()
                .any(|(i, s)| tokens[i] != *s)
        {
            return Err(DataError::VocabLayout);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Word ids without BOS/EOS; unknown words map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(Self::UNK))
            .collect()
    }

    /// Space-joined words, skipping structural specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= Self::SPECIALS.len() || i == Self::UNK)
            .map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::to_writer_pretty(BufWriter::new(file), &self.tokens)
            .map_err(|e| DataError::Schema {
                line: 0,
                detail: e.to_string(),
            })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tokens: Vec<String> =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| DataError::Schema {
                line: 0,
                detail: e.to_string(),
            })?;
        Self::from_tokens(tokens)
    }
}
