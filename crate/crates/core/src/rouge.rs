//! ROUGE-1/2/L over whitespace tokens.
//!
//! No stemming, β = 1 for F1, and every empty denominator yields 0. Corpus
//! scores are macro averages of per-example precision, recall and F1.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(overlap, candidate);
        let recall = ratio(overlap, reference);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: Score,
    pub rouge2: Score,
    #[serde(rename = "rougeL")]
    pub rouge_l: Score,
}

impl RougeReport {
    /// True when the F1 of each metric is strictly greater than in `other`.
    pub fn f1_strictly_above(&self, other: &RougeReport) -> bool {
        self.rouge1.f1 > other.rouge1.f1 && self.rouge2.f1 > other.rouge2.f1 && self.rouge_l.f1 > other.rouge_l.f1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RougeError {
    #[error("corpus scoring needs at least one pair")]
    Empty,
}

pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngrams<'a>(toks: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut out = BTreeMap::new();
    if n == 0 || toks.len() < n {
        return out;
    }
    for w in toks.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

/// ROUGE-N with clipped n-gram counts. `n == 0` scores zero.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Score {
    let (c, r) = (tokens(candidate), tokens(reference));
    let (cn, rn) = (ngrams(&c, n), ngrams(&r, n));
    let overlap = cn
        .iter()
        .map(|(g, &cc)| cc.min(rn.get(g).copied().unwrap_or(0)))
        .sum();
    Score::from_counts(overlap, cn.values().sum(), rn.values().sum())
}

/// Longest common subsequence length by the O(mn) table, two rows at a time.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Score {
    let (c, r) = (tokens(candidate), tokens(reference));
    Score::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

pub fn score_pair(candidate: &str, reference: &str) -> RougeReport {
    RougeReport {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// Mean of per-example scores, summed in input order.
pub fn corpus_rouge<C: AsRef<str>, R: AsRef<str>>(pairs: &[(C, R)]) -> Result<RougeReport, RougeError> {
    if pairs.is_empty() {
        return Err(RougeError::Empty);
    }
    let mut sum = [[0.0f64; 3]; 3];
    for (c, r) in pairs {
        let rep = score_pair(c.as_ref(), r.as_ref());
        for (acc, s) in sum.iter_mut().zip([rep.rouge1, rep.rouge2, rep.rouge_l]) {
            acc[0] += s.precision;
            acc[1] += s.recall;
            acc[2] += s.f1;
        }
    }
    let n = pairs.len() as f64;
    let mean = |a: [f64; 3]| Score {
        precision: a[0] / n,
        recall: a[1] / n,
        f1: a[2] / n,
    };
    Ok(RougeReport {
        rouge1: mean(sum[0]),
        rouge2: mean(sum[1]),
        rouge_l: mean(sum[2]),
    })
}
