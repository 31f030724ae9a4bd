//! Caption metrics: BLEU, ROUGE-L and CIDEr.
//!
//! Inputs are token lists produced by [`tokenize`]. BLEU is unsmoothed: any
//! n-gram order with zero matches makes the score 0.

use std::collections::BTreeMap;

/// Lowercases, replaces ASCII punctuation with spaces and splits on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram total for order `n`.
fn clipped(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    let total = candidate.len().saturating_sub(n - 1);
    (matched, total)
}

/// Reference length closest to `c`, ties going to the shorter.
fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn combine(matches: &[(usize, usize)], c: usize, r: usize) -> f64 {
    if c == 0 || matches.iter().any(|&(m, t)| m == 0 || t == 0) {
        return 0.0;
    }
    let n = matches.len() as f64;
    let log_p: f64 = matches
        .iter()
        .map(|&(m, t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n;
    brevity_penalty(c, r) * log_p.exp()
}

/// Sentence BLEU with uniform weights over orders `1..=n`.
pub fn bleu_n(candidate: &[String], references: &[Vec<String>], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let matches: Vec<(usize, usize)> = (1..=n).map(|k| clipped(candidate, references, k)).collect();
    combine(
        &matches,
        candidate.len(),
        closest_ref_len(candidate.len(), references),
    )
}

/// Corpus BLEU: clipped counts and lengths are pooled before combining.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    assert_eq!(candidates.len(), references.len());
    let mut pooled = vec![(0usize, 0usize); n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            continue;
        }
        for (k, slot) in pooled.iter_mut().enumerate() {
            let (m, t) = clipped(cand, refs, k + 1);
            slot.0 += m;
            slot.1 += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    combine(&pooled, c, r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
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

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with β = 1.2, best over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / candidate.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Document frequencies of every n-gram (orders 1..=4) over the reference
/// sets, one document per image.
#[derive(Debug, Clone)]
pub struct CiderIdf {
    log_docs: f64,
    df: BTreeMap<Vec<String>, usize>,
}

impl CiderIdf {
    pub fn new(references: &[Vec<Vec<String>>]) -> Self {
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for refs in references {
            let mut seen: std::collections::BTreeSet<&[String]> = Default::default();
            for r in refs {
                for n in 1..=4 {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_default() += 1;
            }
        }
        if references.len() < 2 {
            log::warn!("CIDEr over a single image: every IDF weight is zero");
        }
        Self {
            log_docs: (references.len().max(1) as f64).ln(),
            df,
        }
    }

    fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1) as f64;
        self.log_docs - df.ln()
    }

    /// TF-IDF weights of the order-`n` n-grams, with their Euclidean norm.
    fn vector<'a>(&self, tokens: &'a [String], n: usize) -> (BTreeMap<&'a [String], f64>, f64) {
        let vec: BTreeMap<&[String], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| (g, c as f64 * self.idf(g)))
            .collect();
        let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
        (vec, norm)
    }

    /// CIDEr of one candidate against its references.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for r in references {
            let mut per_n = 0.0;
            for n in 1..=4 {
                let (vc, nc) = self.vector(candidate, n);
                let (vr, nr) = self.vector(r, n);
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = vc
                    .iter()
                    .map(|(g, w)| w * vr.get(g).copied().unwrap_or(0.0))
                    .sum();
                per_n += dot / (nc * nr);
            }
            total += per_n / 4.0;
        }
        10.0 * total / references.len() as f64
    }
}

/// Per-candidate CIDEr; IDF statistics come from the whole reference corpus.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Vec<f64> {
    assert_eq!(candidates.len(), references.len());
    let idf = CiderIdf::new(references);
    candidates
        .iter()
        .zip(references)
        .map(|(c, r)| idf.score(c, r))
        .collect()
}
