//! Top-K retrieval of target-style training sentences.
//!
//! Three retrievers share one contract: the result holds at most `K`
//! sentences of the requested style, ordered by descending score with ties
//! broken by lower sentence id, and never contains a sentence token-identical
//! to the query.

mod dense;
mod random;
mod sparse;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

pub use dense::{refresh_dense_index, DenseIndex};
pub use random::{retrieve_random, retrieve_random_with};
pub use sparse::{Bm25Params, SparseIndex};

use crate::corpus::EncodedCorpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrieverKind {
    Sparse,
    Dense,
    Random,
}

impl RetrieverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrieverKind::Sparse => "sparse",
            RetrieverKind::Dense => "dense",
            RetrieverKind::Random => "random",
        }
    }
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrieverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" | "bm25" => Ok(RetrieverKind::Sparse),
            "dense" | "mips" => Ok(RetrieverKind::Dense),
            "random" => Ok(RetrieverKind::Random),
            other => Err(Error::Format(format!("unknown retriever `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub style: usize,
    /// Sentence ids within the style subset, best first.
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    /// Fewer than `K` candidates were available after exclusion.
    pub short: bool,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sentences(&self, pool: &CandidatePool) -> Vec<Vec<usize>> {
        self.ids.iter().map(|&i| pool.sentences[i].clone()).collect()
    }
}

/// The sentences of one style plus a lookup from token sequence to ids.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub sentences: Vec<Vec<usize>>,
    by_tokens: HashMap<Vec<usize>, Vec<usize>>,
}

impl CandidatePool {
    pub fn new(sentences: Vec<Vec<usize>>) -> Self {
        let mut by_tokens: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
        for (i, s) in sentences.iter().enumerate() {
            by_tokens.entry(s.clone()).or_default().push(i);
        }
        CandidatePool {
            sentences,
            by_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Ids of sentences token-identical to `query`.
    pub fn identical_to(&self, query: &[usize]) -> &[usize] {
        self.by_tokens.get(query).map_or(&[], Vec::as_slice)
    }
}

/// Top-`k` of `scores` by (score desc, id asc), skipping `excluded` ids.
pub fn top_k(scores: &[f64], k: usize, excluded: &[usize]) -> Vec<(usize, f64)> {
    let mut cands: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if cands.len() > k && k > 0 {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.truncate(k);
    cands.sort_by(cmp);
    cands
}

fn finish(style: usize, k: usize, ranked: Vec<(usize, f64)>) -> RetrievalResult {
    let short = ranked.len() < k;
    let (ids, scores) = ranked.into_iter().unzip();
    RetrievalResult {
        style,
        ids,
        scores,
        short,
    }
}

/// What a retriever may use to answer a query.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    /// Discrete tokens (argmax tokens for soft sequences); used for BM25 and
    /// for excluding the query itself.
    pub tokens: &'a [usize],
    /// Pooled query embedding for dense search.
    pub embedding: Option<&'a [f64]>,
}

/// Per-style pools and indices behind one retrieval strategy.
pub struct Retriever {
    pub kind: RetrieverKind,
    pub pools: Vec<CandidatePool>,
    sparse: Vec<SparseIndex>,
    dense: Arc<Vec<DenseIndex>>,
    rng: ChaCha8Rng,
}

impl Retriever {
    pub fn new(kind: RetrieverKind, corpus: &EncodedCorpus, seed: u64) -> Self {
        use rand::SeedableRng;
        let pools: Vec<CandidatePool> = corpus
            .subsets
            .iter()
            .map(|s| CandidatePool::new(s.clone()))
            .collect();
        let sparse = if kind == RetrieverKind::Sparse {
            pools
                .iter()
                .map(|p| SparseIndex::build(&p.sentences, Bm25Params::default()))
                .collect()
        } else {
            Vec::new()
        };
        Retriever {
            kind,
            pools,
            sparse,
            dense: Arc::new(Vec::new()),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn num_styles(&self) -> usize {
        self.pools.len()
    }

    /// Installs a new dense snapshot; readers holding the old one keep it.
    pub fn swap_dense(&mut self, indices: Vec<DenseIndex>) {
        self.dense = Arc::new(indices);
    }

    pub fn dense_snapshot(&self) -> Arc<Vec<DenseIndex>> {
        Arc::clone(&self.dense)
    }

    pub fn sparse_index(&self, style: usize) -> Option<&SparseIndex> {
        self.sparse.get(style)
    }

    pub fn retrieve(&mut self, style: usize, query: Query<'_>, k: usize) -> Result<RetrievalResult> {
        if style >= self.pools.len() {
            return Err(Error::StyleOutOfRange {
                style,
                count: self.pools.len(),
            });
        }
        let pool = &self.pools[style];
        match self.kind {
            RetrieverKind::Sparse => Ok(self.sparse[style].retrieve(pool, style, query.tokens, k)),
            RetrieverKind::Dense => {
                let emb = query
                    .embedding
                    .ok_or_else(|| Error::Format("dense retrieval needs an embedding".into()))?;
                let index = self.dense.get(style).ok_or(Error::EmptyIndex)?;
                index.retrieve(pool, emb, Some(query.tokens), k)
            }
            RetrieverKind::Random => {
                Ok(retrieve_random_with(pool, style, query.tokens, k, &mut self.rng))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_by_score_then_id() {
        let scores = [0.5, 0.9, 0.5, 0.1, 0.9];
        let got = top_k(&scores, 3, &[]);
        assert_eq!(got, vec![(1, 0.9), (4, 0.9), (0, 0.5)]);
        let got = top_k(&scores, 3, &[1]);
        assert_eq!(got, vec![(4, 0.9), (0, 0.5), (2, 0.5)]);
        assert_eq!(top_k(&scores, 10, &[0, 1, 2]).len(), 2);
    }

    #[test]
    fn identical_lookup_finds_duplicates() {
        let pool = CandidatePool::new(vec![vec![4, 5], vec![6], vec![4, 5]]);
        assert_eq!(pool.identical_to(&[4, 5]), &[0, 2]);
        assert!(pool.identical_to(&[7]).is_empty());
    }
}
