//! Corpus-level BLEU-4 with brevity penalty.
//!
//! Modified precisions pool clipped n-gram matches over the whole corpus.
//! An order of two or more with no match is smoothed to
//! `(0 + 1) / (total + 1)`; a unigram precision of zero gives BLEU 0.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Pooled statistics: clipped matches and candidate totals per order, plus
/// candidate and reference lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add<T: Eq + Hash>(&mut self, candidate: &[T], reference: &[T]) {
        self.cand_len += candidate.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            for (g, &c) in &cand {
                self.matches[n - 1] += c.min(refs.get(g).copied().unwrap_or(0));
                self.totals[n - 1] += c;
            }
        }
    }

    /// Per-order modified precisions after smoothing.
    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut p = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            let (m, t) = (self.matches[n], self.totals[n]);
            p[n] = if n > 0 && m == 0 {
                1.0 / (t as f64 + 1.0)
            } else if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            };
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            0.0
        } else if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        }
    }

    /// BLEU on the 0 to 100 scale.
    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p.iter().any(|&x| x == 0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

/// Corpus BLEU-4 of aligned `candidates` against single `references`.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut stats = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        stats.add(c, r);
    }
    Ok(stats.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c: Vec<_> = ["the food was good", "i love it", "ok"].map(toks).to_vec();
        assert!((bleu(&c, &c).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_overlap_scores_zero() {
        let c = vec![toks("a b c d")];
        let r = vec![toks("e f g h")];
        assert_eq!(bleu(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let c = vec![toks("a")];
        assert!(matches!(bleu(&c, &[]), Err(Error::LengthMismatch(1, 0))));
        let e: Vec<Vec<&str>> = Vec::new();
        assert!(matches!(bleu(&e, &e), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn clipping_limits_repeated_words() {
        let mut s = BleuStats::default();
        s.add(&toks("the the the the"), &toks("the cat"));
        assert_eq!(s.matches[0], 1);
        assert_eq!(s.totals[0], 4);
    }
}
