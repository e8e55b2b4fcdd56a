//! Interpolated Kneser-Ney n-gram language model over token ids.
//!
//! Highest-order n-grams and n-grams opening with `<s>` use raw counts;
//! every other lower-order n-gram uses its continuation count (the number of
//! distinct words seen before it). Each order interpolates with the next
//! lower one through the discounted mass, and unigrams interpolate with a
//! uniform distribution over the model vocabulary (every training word plus
//! `<unk>` and `</s>`), so each conditional distribution sums to one.

use std::collections::{BTreeSet, HashMap};

use crate::corpus::{BOS, EOS, UNK};

/// Anything that scores a token given its history.
pub trait TokenLm {
    /// `ln p(word | history)`; `history` starts with `<s>`.
    fn log_prob(&self, history: &[usize], word: usize) -> f64;
}

/// Every word equally likely.
#[derive(Debug, Clone, Copy)]
pub struct UniformLm {
    pub size: usize,
}

impl TokenLm for UniformLm {
    fn log_prob(&self, _: &[usize], _: usize) -> f64 {
        -(self.size as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ContextStats {
    total: u64,
    types: u64,
}

#[derive(Debug, Clone)]
pub struct NGramLm {
    pub order: usize,
    pub discount: f64,
    vocab: BTreeSet<usize>,
    /// Adjusted counts of n-grams of length `k + 1` at index `k`.
    counts: Vec<HashMap<Vec<usize>, u64>>,
    /// Sums and distinct followers of each context, per n-gram length.
    contexts: Vec<HashMap<Vec<usize>, ContextStats>>,
}

impl NGramLm {
    pub fn train(sentences: &[Vec<usize>], order: usize, discount: f64) -> Self {
        assert!(order >= 1);
        let mut vocab: BTreeSet<usize> = [UNK, EOS].into_iter().collect();
        let mut raw: Vec<HashMap<Vec<usize>, u64>> = vec![HashMap::new(); order];
        let mut left: Vec<HashMap<Vec<usize>, BTreeSet<usize>>> = vec![HashMap::new(); order];
        for s in sentences {
            vocab.extend(s.iter().copied());
            let padded: Vec<usize> = std::iter::once(BOS)
                .chain(s.iter().copied())
                .chain(std::iter::once(EOS))
                .collect();
            // Every n-gram ending at position i (> 0; `<s>` is never predicted).
            for i in 1..padded.len() {
                for n in 1..=order.min(i + 1) {
                    let gram = padded[i + 1 - n..=i].to_vec();
                    *raw[n - 1].entry(gram.clone()).or_insert(0) += 1;
                    if i + 1 > n {
                        left[n - 1].entry(gram).or_default().insert(padded[i - n]);
                    }
                }
            }
        }
        let mut counts: Vec<HashMap<Vec<usize>, u64>> = vec![HashMap::new(); order];
        for n in 1..=order {
            for (gram, &c) in &raw[n - 1] {
                let adjusted = if n == order || gram[0] == BOS {
                    c
                } else {
                    left[n - 1].get(gram).map_or(0, |s| s.len() as u64)
                };
                if adjusted > 0 {
                    counts[n - 1].insert(gram.clone(), adjusted);
                }
            }
        }
        let mut contexts: Vec<HashMap<Vec<usize>, ContextStats>> = vec![HashMap::new(); order];
        for n in 1..=order {
            for (gram, &c) in &counts[n - 1] {
                let e = contexts[n - 1].entry(gram[..n - 1].to_vec()).or_default();
                e.total += c;
                e.types += 1;
            }
        }
        NGramLm {
            order,
            discount,
            vocab,
            counts,
            contexts,
        }
    }

    /// Words the model predicts (training words, `<unk>`, `</s>`).
    pub fn vocabulary(&self) -> impl Iterator<Item = usize> + '_ {
        self.vocab.iter().copied()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn map(&self, w: usize) -> usize {
        if self.vocab.contains(&w) || w == BOS {
            w
        } else {
            UNK
        }
    }

    fn interpolated(&self, context: &[usize], word: usize) -> f64 {
        let n = context.len() + 1;
        let lower = if context.is_empty() {
            1.0 / self.vocab.len() as f64
        } else {
            self.interpolated(&context[1..], word)
        };
        let Some(stats) = self.contexts[n - 1].get(context) else {
            return lower;
        };
        let mut gram = context.to_vec();
        gram.push(word);
        let c = self.counts[n - 1].get(&gram).copied().unwrap_or(0) as f64;
        let total = stats.total as f64;
        (c - self.discount).max(0.0) / total + self.discount * stats.types as f64 / total * lower
    }

    pub fn prob(&self, history: &[usize], word: usize) -> f64 {
        let history: Vec<usize> = history.iter().map(|&w| self.map(w)).collect();
        let start = history.len().saturating_sub(self.order - 1);
        self.interpolated(&history[start..], self.map(word))
    }
}

impl TokenLm for NGramLm {
    fn log_prob(&self, history: &[usize], word: usize) -> f64 {
        self.prob(history, word).ln()
    }
}

/// Summed NLL of a sentence (end-of-sentence included) and its token count.
pub fn sentence_nll<L: TokenLm + ?Sized>(lm: &L, sentence: &[usize]) -> (f64, usize) {
    let mut history = vec![BOS];
    let mut total = 0.0;
    for &w in sentence.iter().chain(std::iter::once(&EOS)) {
        total -= lm.log_prob(&history, w);
        history.push(w);
    }
    (total, sentence.len() + 1)
}

/// `exp(total NLL / total tokens)` over the corpus.
pub fn perplexity<L: TokenLm + ?Sized>(lm: &L, sentences: &[Vec<usize>]) -> f64 {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for s in sentences {
        let (a, b) = sentence_nll(lm, s);
        nll += a;
        tokens += b;
    }
    (nll / tokens.max(1) as f64).exp()
}
