//! Caption quality and diversity metrics over token id sequences.
//!
//! Quality: BLEU with clipped n-gram precision, ROUGE-L, and CIDEr-D (tf-idf
//! cosine per n-gram order with count clipping, a Gaussian length penalty,
//! and document frequencies counted once per image). Diversity: distinct
//! n-gram ratio, mutual BLEU among a caption set, and a spectral score from
//! the eigenvalue entropy of the pairwise CIDEr-D kernel. Plus report
//! helpers: per-mode means, the oracle (per-image best), cluster purity, and
//! the adjusted Rand index.

use std::collections::{HashMap, HashSet};

use crate::linalg::symmetric_eigen;

/// Substituted for a clipped precision only when it would be exactly zero.
pub const BLEU_EPS: f64 = 1e-9;
pub const BLEU_MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_N: usize = 4;

fn ngram_counts(s: &[usize], n: usize) -> HashMap<Vec<usize>, f64> {
    let mut counts = HashMap::new();
    if s.len() >= n && n > 0 {
        for w in s.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// BLEU-`max_n` of one candidate against its references: geometric mean of
/// clipped precisions times the brevity penalty. The reference length is the
/// closest to the candidate's, ties toward the shorter one. A precision that
/// would be zero (including missing orders on short candidates) becomes
/// [`BLEU_EPS`] instead, so scores stay comparable without special cases.
pub fn bleu(cand: &[usize], refs: &[Vec<usize>], max_n: usize) -> f64 {
    assert!(max_n >= 1, "need at least unigram precision");
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("non-empty refs");
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand_counts = ngram_counts(cand, n);
        let total: f64 = cand_counts.values().sum();
        let mut clipped = 0.0;
        for (g, &count) in &cand_counts {
            let best_ref = refs
                .iter()
                .map(|r| ngram_counts(r, n).get(g).copied().unwrap_or(0.0))
                .fold(0.0, f64::max);
            clipped += count.min(best_ref);
        }
        let p = if clipped > 0.0 && total > 0.0 {
            clipped / total
        } else {
            BLEU_EPS
        };
        log_sum += p.ln() / max_n as f64;
    }
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_sum.exp()
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1.2), maximized over the references.
pub fn rouge_l(cand: &[usize], refs: &[Vec<usize>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let lcs = lcs_len(cand, r) as f64;
        if lcs == 0.0 {
            continue;
        }
        let prec = lcs / cand.len() as f64;
        let rec = lcs / r.len() as f64;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        best = best.max((1.0 + b2) * prec * rec / (rec + b2 * prec));
    }
    best
}

/// CIDEr-D scorer. Document frequencies come from the reference corpus, each
/// n-gram counted at most once per image, and the idf scale is ln(#images).
#[derive(Debug, Clone)]
pub struct CiderD {
    df: Vec<HashMap<Vec<usize>, f64>>,
    log_images: f64,
}

struct CiderVec {
    weights: Vec<HashMap<Vec<usize>, f64>>,
    norms: Vec<f64>,
    length: f64,
}

impl CiderD {
    pub fn fit(refs_per_image: &[Vec<Vec<usize>>]) -> Self {
        let mut df = vec![HashMap::new(); CIDER_N];
        for refs in refs_per_image {
            for (n, map) in df.iter_mut().enumerate() {
                let mut seen: HashSet<Vec<usize>> = HashSet::new();
                for r in refs {
                    seen.extend(ngram_counts(r, n + 1).into_keys());
                }
                for g in seen {
                    *map.entry(g).or_insert(0.0) += 1.0;
                }
            }
        }
        Self {
            df,
            log_images: (refs_per_image.len().max(1) as f64).ln(),
        }
    }

    fn vectorize(&self, s: &[usize]) -> CiderVec {
        let mut weights = Vec::with_capacity(CIDER_N);
        let mut norms = Vec::with_capacity(CIDER_N);
        for n in 1..=CIDER_N {
            let mut w = ngram_counts(s, n);
            let mut norm = 0.0;
            for (g, v) in w.iter_mut() {
                let df = self.df[n - 1].get(g).copied().unwrap_or(0.0).max(1.0);
                *v *= self.log_images - df.ln();
                norm += *v * *v;
            }
            weights.push(w);
            norms.push(norm.sqrt());
        }
        CiderVec {
            weights,
            norms,
            length: s.len() as f64,
        }
    }

    /// Sentence score: per order, count-clipped tf-idf cosine against each
    /// reference with a Gaussian penalty on the length difference, averaged
    /// over references and orders, scaled by 10.
    pub fn sentence(&self, cand: &[usize], refs: &[Vec<usize>]) -> f64 {
        if cand.is_empty() || refs.is_empty() {
            return 0.0;
        }
        let hyp = self.vectorize(cand);
        let mut total = 0.0;
        for r in refs {
            let rv = self.vectorize(r);
            let delta = hyp.length - rv.length;
            let gauss = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..CIDER_N {
                let mut dot = 0.0;
                for (g, &hw) in &hyp.weights[n] {
                    if let Some(&rw) = rv.weights[n].get(g) {
                        dot += hw.min(rw) * rw;
                    }
                }
                if hyp.norms[n] > 0.0 && rv.norms[n] > 0.0 {
                    dot /= hyp.norms[n] * rv.norms[n];
                }
                total += dot * gauss;
            }
        }
        10.0 * total / (CIDER_N as f64 * refs.len() as f64)
    }
}

/// Distinct n-grams across the set divided by total n-gram tokens.
pub fn div_n(caps: &[Vec<usize>], n: usize) -> f64 {
    let mut distinct: HashSet<Vec<usize>> = HashSet::new();
    let mut total = 0usize;
    for c in caps {
        if c.len() >= n && n > 0 {
            for w in c.windows(n) {
                distinct.insert(w.to_vec());
            }
            total += c.len() - n + 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// Mean BLEU-4 of each caption against the others; high means redundant.
pub fn mbleu(caps: &[Vec<usize>]) -> f64 {
    if caps.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, c) in caps.iter().enumerate() {
        let others: Vec<Vec<usize>> = caps
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, o)| o.clone())
            .collect();
        sum += bleu(c, &others, BLEU_MAX_N);
    }
    sum / caps.len() as f64
}

/// Spectral diversity of a caption set: symmetrize the pairwise CIDEr-D
/// kernel (df fit on the set itself), take the eigenvalue distribution, and
/// report its entropy over ln(m). Identical captions give 0, mutually
/// disjoint equal-length captions give 1.
pub fn self_cider(caps: &[Vec<usize>]) -> f64 {
    let m = caps.len();
    if m < 2 {
        return 0.0;
    }
    let per_image: Vec<Vec<Vec<usize>>> = caps.iter().map(|c| vec![c.clone()]).collect();
    let scorer = CiderD::fit(&per_image);
    let mut k = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            k[i][j] = scorer.sentence(&caps[i], std::slice::from_ref(&caps[j]));
        }
    }
    let sym: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| 0.5 * (k[i][j] + k[j][i])).collect())
        .collect();
    let flat: Vec<f64> = sym.iter().flatten().copied().collect();
    let (vals, _) = symmetric_eigen(&flat, m);
    let clamped: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
    let trace: f64 = clamped.iter().sum();
    if trace <= 1e-12 {
        return 0.0;
    }
    let entropy: f64 = clamped
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / trace;
            -p * p.ln()
        })
        .sum();
    (entropy / (m as f64).ln()).clamp(0.0, 1.0)
}

/// Means and the per-image best over a sentence score matrix
/// (`scores[image][mode]`). Sums run in image order on both paths, so the
/// oracle is never below any per-mode mean, bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub per_mode: Vec<f64>,
    pub oracle: f64,
}

pub fn oracle_report(scores: &[Vec<f64>]) -> OracleReport {
    assert!(!scores.is_empty(), "need at least one image");
    let n_modes = scores[0].len();
    assert!(scores.iter().all(|r| r.len() == n_modes));
    let n = scores.len() as f64;
    let per_mode: Vec<f64> = (0..n_modes)
        .map(|k| scores.iter().map(|row| row[k]).sum::<f64>() / n)
        .collect();
    let oracle = scores
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n;
    OracleReport { per_mode, oracle }
}

/// Score every generated caption against its image's references.
pub fn sentence_score_matrix<F>(
    score: F,
    gens: &[Vec<Vec<usize>>],
    refs: &[Vec<Vec<usize>>],
) -> Vec<Vec<f64>>
where
    F: Fn(&[usize], &[Vec<usize>]) -> f64,
{
    assert_eq!(gens.len(), refs.len(), "one reference set per image");
    gens.iter()
        .zip(refs)
        .map(|(g, r)| g.iter().map(|c| score(c, r)).collect())
        .collect()
}

/// Fraction of captions whose assigned mode's dominant family matches their
/// own: sum over modes of the largest family overlap, over the total.
pub fn mode_purity(modes: &[usize], families: &[usize]) -> f64 {
    assert_eq!(modes.len(), families.len());
    if modes.is_empty() {
        return 0.0;
    }
    let mut table: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&m, &f) in modes.iter().zip(families) {
        *table.entry(m).or_default().entry(f).or_insert(0) += 1;
    }
    let hits: usize = table
        .values()
        .map(|fams| fams.values().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / modes.len() as f64
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut cont: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cont.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let index: f64 = cont.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}
