//! Uniform sampling without replacement, the retrieval-free baseline.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{finish, CandidatePool, RetrievalResult};

pub fn retrieve_random(
    pool: &CandidatePool,
    style: usize,
    query: &[usize],
    k: usize,
    seed: u64,
) -> RetrievalResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    retrieve_random_with(pool, style, query, k, &mut rng)
}

/// Draws `k` distinct sentences, none identical to `query`. Scores are zero.
pub fn retrieve_random_with(
    pool: &CandidatePool,
    style: usize,
    query: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> RetrievalResult {
    let excluded = pool.identical_to(query);
    let allowed: Vec<usize> = if excluded.is_empty() {
        (0..pool.len()).collect()
    } else {
        (0..pool.len()).filter(|i| !excluded.contains(i)).collect()
    };
    let take = k.min(allowed.len());
    let ranked = sample(rng, allowed.len(), take)
        .into_iter()
        .map(|i| (allowed[i], 0.0))
        .collect();
    finish(style, k, ranked)
}
