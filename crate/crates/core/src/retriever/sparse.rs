//! BM25 over a per-style inverted index.

use std::collections::{BTreeSet, HashMap};

use super::{finish, top_k, CandidatePool, RetrievalResult};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: usize,
    pub tf: usize,
}

#[derive(Debug, Clone)]
pub struct SparseIndex {
    pub params: Bm25Params,
    postings: HashMap<usize, Vec<Posting>>,
    doc_lens: Vec<usize>,
    avgdl: f64,
    idf: HashMap<usize, f64>,
}

/// `ln((N - n + 0.5) / (n + 0.5) + 1)`, floored at zero.
pub fn idf(num_docs: usize, doc_freq: usize) -> f64 {
    let (n, df) = (num_docs as f64, doc_freq as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln().max(0.0)
}

impl SparseIndex {
    /// Indexes every non-reserved token; document length counts all tokens.
    pub fn build(docs: &[Vec<usize>], params: Bm25Params) -> Self {
        let mut postings: HashMap<usize, Vec<Posting>> = HashMap::new();
        for (doc, tokens) in docs.iter().enumerate() {
            let mut tf: HashMap<usize, usize> = HashMap::new();
            for &t in tokens.iter().filter(|&&t| !Vocabulary::is_reserved(t)) {
                *tf.entry(t).or_default() += 1;
            }
            let mut terms: Vec<_> = tf.into_iter().collect();
            terms.sort_unstable();
            for (term, tf) in terms {
                postings.entry(term).or_default().push(Posting { doc, tf });
            }
        }
        let doc_lens: Vec<usize> = docs.iter().map(Vec::len).collect();
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        let idf = postings
            .iter()
            .map(|(&term, p)| (term, idf(docs.len(), p.len())))
            .collect();
        SparseIndex {
            params,
            postings,
            doc_lens,
            avgdl,
            idf,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn postings(&self, term: usize) -> &[Posting] {
        self.postings.get(&term).map_or(&[], Vec::as_slice)
    }

    fn term_score(&self, term: usize, tf: usize, doc_len: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let idf = self.idf.get(&term).copied().unwrap_or(0.0);
        let tf = tf as f64;
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len as f64 / self.avgdl))
    }

    fn query_terms(query: &[usize]) -> BTreeSet<usize> {
        query
            .iter()
            .copied()
            .filter(|&t| !Vocabulary::is_reserved(t))
            .collect()
    }

    /// BM25 of `query` (a set of terms) against document `doc`.
    pub fn score(&self, query: &[usize], doc: usize) -> Result<f64> {
        if doc >= self.num_docs() {
            return Err(Error::UnknownDoc(doc));
        }
        let mut total = 0.0;
        for term in Self::query_terms(query) {
            if let Some(p) = self.postings(term).iter().find(|p| p.doc == doc) {
                total += self.term_score(term, p.tf, self.doc_lens[doc]);
            }
        }
        Ok(total)
    }

    /// Scores of every document, accumulated through the postings lists.
    pub fn score_all(&self, query: &[usize]) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        for term in Self::query_terms(query) {
            for p in self.postings(term) {
                scores[p.doc] += self.term_score(term, p.tf, self.doc_lens[p.doc]);
            }
        }
        scores
    }

    pub fn retrieve(
        &self,
        pool: &CandidatePool,
        style: usize,
        query: &[usize],
        k: usize,
    ) -> RetrievalResult {
        let scores = self.score_all(query);
        let ranked = top_k(&scores, k, pool.identical_to(query));
        finish(style, k, ranked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // ids: good=4 food=5 bad=6 service=7
    fn docs() -> Vec<Vec<usize>> {
        vec![vec![4, 5], vec![6, 5], vec![6, 7]]
    }

    #[test]
    fn disjoint_query_scores_zero() {
        let idx = SparseIndex::build(&docs(), Bm25Params::default());
        assert_eq!(idx.score(&[7], 0).unwrap(), 0.0);
        assert!(matches!(idx.score(&[4], 3), Err(Error::UnknownDoc(3))));
    }

    #[test]
    fn length_normalization_vanishes_at_average_length() {
        let d = vec![vec![4, 5], vec![6, 5]];
        let a = SparseIndex::build(&d, Bm25Params { k1: 1.2, b: 0.3 });
        let b = SparseIndex::build(&d, Bm25Params { k1: 1.2, b: 0.6 });
        assert_eq!(a.avgdl(), 2.0);
        assert_eq!(a.score(&[6], 1).unwrap(), b.score(&[6], 1).unwrap());
    }

    #[test]
    fn score_all_agrees_with_single_doc_scores() {
        let idx = SparseIndex::build(&docs(), Bm25Params::default());
        let q = [6, 5, 6];
        let all = idx.score_all(&q);
        for (d, s) in all.iter().enumerate() {
            assert_eq!(*s, idx.score(&q, d).unwrap());
        }
    }

    #[test]
    fn query_sentence_is_excluded() {
        let pool = CandidatePool::new(docs());
        let idx = SparseIndex::build(&pool.sentences, Bm25Params::default());
        let r = idx.retrieve(&pool, 0, &[6, 5], 3);
        assert!(!r.ids.contains(&1));
        assert!(r.short);
        assert_eq!(r.ids, vec![0, 2]);
    }
}
