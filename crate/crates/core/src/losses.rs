//! Training objectives.
//!
//! The generator minimizes `rec + cyc + adv + ret + bow` (each weighted,
//! weights default to 1):
//!
//! * `rec = -log P(x | x, s_i)`, retrieving from the source style;
//! * `cyc = -log P(x | y, s_i)` where `y = G(x, s_j)` is the soft transfer;
//! * `adv = -log P_C(j | y)` through the frozen discriminator;
//! * `ret = 1 - cos(q(x), q(y))`;
//! * `bow`, the negated, halved sum of the two new-word log-likelihood terms,
//!   so minimizing it raises the probability of words the retrieved samples
//!   carry but the input lacks.
//!
//! The discriminator minimizes `c1 + c2`, with retrieved-set terms averaged
//! over the set members. Losses are averaged over the batch.

use std::collections::BTreeSet;

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{Vocabulary, EOS, PAD};
use crate::decoder::{Feed, SoftSequence};
use crate::discriminator::TextCnn;
use crate::encoder::SeqInput;
use crate::error::Result;
use crate::model::{Generator, RetrievedBatch};

const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub cyc: f64,
    pub adv: f64,
    pub ret: f64,
    pub bow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            cyc: 1.0,
            adv: 1.0,
            ret: 1.0,
            bow: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// `x -> x`, from the source style.
    Reconstruct,
    /// `x -> y`, from the target style.
    Forward,
    /// `y -> x`, from the source style.
    Backward,
}

/// Supplies retrieved sentences during loss construction.
pub trait RetrievalSource {
    /// One list of retrieved token sequences per batch element. `embeddings`
    /// holds one pooled query embedding per row.
    fn retrieve(
        &mut self,
        purpose: Purpose,
        styles: &[usize],
        tokens: &[Vec<usize>],
        embeddings: &Mat,
    ) -> Result<Vec<Vec<Vec<usize>>>>;
}

/// Records every answer of an inner source for later replay.
pub struct Recording<'a> {
    pub inner: &'a mut dyn RetrievalSource,
    pub log: Vec<Vec<Vec<Vec<usize>>>>,
}

impl RetrievalSource for Recording<'_> {
    fn retrieve(
        &mut self,
        purpose: Purpose,
        styles: &[usize],
        tokens: &[Vec<usize>],
        embeddings: &Mat,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let r = self.inner.retrieve(purpose, styles, tokens, embeddings)?;
        self.log.push(r.clone());
        Ok(r)
    }
}

/// Replays recorded answers in order, ignoring the queries.
pub struct Replay {
    pub log: Vec<Vec<Vec<Vec<usize>>>>,
    pub next: usize,
}

impl Replay {
    pub fn new(log: Vec<Vec<Vec<Vec<usize>>>>) -> Self {
        Replay { log, next: 0 }
    }
}

impl RetrievalSource for Replay {
    fn retrieve(
        &mut self,
        _: Purpose,
        _: &[usize],
        _: &[Vec<usize>],
        _: &Mat,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let r = self.log[self.next % self.log.len()].clone();
        self.next += 1;
        Ok(r)
    }
}

/// A training batch: sentences with their source style and a target style.
#[derive(Debug, Clone)]
pub struct StyleBatch {
    pub sentences: Vec<Vec<usize>>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl StyleBatch {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn lens(&self) -> Vec<usize> {
        self.sentences.iter().map(Vec::len).collect()
    }
}

/// Generator loss nodes plus the detached values the discriminator needs.
pub struct GeneratorPass {
    pub rec: Var,
    pub cyc: Var,
    pub adv: Var,
    pub ret: Var,
    pub bow: Var,
    pub total: Var,
    /// Soft transfer `y = G(x, s_j)`, one `len x V` matrix per element.
    pub transfer_soft: Vec<Mat>,
    /// Soft self-transfer `G(x, s_i)`.
    pub self_soft: Vec<Mat>,
    pub retrieved_forward: Vec<Vec<Vec<usize>>>,
    pub retrieved_backward: Vec<Vec<Vec<usize>>>,
    /// Argmax tokens of the soft transfer.
    pub transfer_tokens: Vec<Vec<usize>>,
}

/// Word types of `retrieved` absent from `reference`, reserved ids excluded.
pub fn new_words(retrieved: &[Vec<usize>], reference: &[usize]) -> BTreeSet<usize> {
    let have: BTreeSet<usize> = reference.iter().copied().collect();
    retrieved
        .iter()
        .flatten()
        .copied()
        .filter(|w| !Vocabulary::is_reserved(*w) && !have.contains(w))
        .collect()
}

/// One direction of the bag-of-words objective under the minimizing sign
/// convention: `-(1/|omega|) sum_i sum_{w in omega} log p_i(w)` over the
/// rows of `log_probs`. Empty `omega` contributes zero.
pub fn bow_direction(log_probs: &Mat, omega: &BTreeSet<usize>) -> f64 {
    if omega.is_empty() {
        return 0.0;
    }
    let total: f64 = log_probs
        .rows()
        .into_iter()
        .map(|row| omega.iter().map(|&w| row[w]).sum::<f64>())
        .sum();
    -total / omega.len() as f64
}

/// `1 - cos(a, b)`; a zero vector yields 1 and sets the flag.
pub fn retrieval_loss(a: &[f64], b: &[f64]) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (1.0, true);
    }
    (1.0 - dot / (na * nb), false)
}

/// Mean over the batch of per-sentence `-sum_t log p(target_t)`, where each
/// target sequence is the sentence followed by `</s>`.
pub fn sequence_nll(g: &mut Graph, log_probs: &[Var], sentences: &[Vec<usize>]) -> Var {
    let batch = sentences.len();
    let steps = log_probs.len();
    let mut targets = vec![PAD; steps * batch];
    let mut mask = Mat::zeros((steps * batch, 1));
    for (b, s) in sentences.iter().enumerate() {
        for t in 0..=s.len() {
            targets[t * batch + b] = if t < s.len() { s[t] } else { EOS };
            mask[[t * batch + b, 0]] = 1.0;
        }
    }
    let stacked = g.concat_rows(log_probs);
    let picked = g.pick_cols(stacked, &targets);
    let mask = g.constant(mask);
    let masked = g.mul(picked, mask);
    let total = g.sum_all(masked);
    g.scale(total, -1.0 / batch as f64)
}

/// Batch mean of the per-element `sum_{t < len} sum_{w in omega} log p_t(w) / |omega|`.
fn bow_sum(g: &mut Graph, log_probs: &[Var], lens: &[usize], omegas: &[BTreeSet<usize>]) -> Var {
    let batch = lens.len();
    let steps = log_probs.len();
    let vocab = g.value(log_probs[0]).ncols();
    let mut weights = Mat::zeros((steps * batch, vocab));
    for (b, omega) in omegas.iter().enumerate() {
        if omega.is_empty() {
            continue;
        }
        let w = 1.0 / omega.len() as f64;
        for t in 0..lens[b].min(steps) {
            for &word in omega {
                weights[[t * batch + b, word]] = w;
            }
        }
    }
    let stacked = g.concat_rows(log_probs);
    let weights = g.constant(weights);
    let prod = g.mul(stacked, weights);
    let total = g.sum_all(prod);
    g.scale(total, 1.0 / batch as f64)
}

/// Rowwise cosine similarity `B x 1`.
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Var {
    let ab = g.mul(a, b);
    let dot = g.sum_cols(ab);
    let aa = g.mul(a, a);
    let na = g.sum_cols(aa);
    let bb = g.mul(b, b);
    let nb = g.sum_cols(bb);
    let eps = Mat::from_elem(g.value(na).dim(), COS_EPS);
    let na = g.add_const(na, &eps);
    let nb = g.add_const(nb, &eps);
    let na = g.sqrt(na);
    let nb = g.sqrt(nb);
    let denom = g.mul(na, nb);
    g.div(dot, denom)
}

/// Mean over rows of `-log_probs[b, classes[b]]`, each row weighted by
/// `row_weights[b]` and the total divided by `batch`.
fn weighted_class_nll(g: &mut Graph, log_probs: Var, classes: &[usize], row_weights: &[f64], batch: usize) -> Var {
    let picked = g.pick_cols(log_probs, classes);
    let w = Mat::from_shape_vec((row_weights.len(), 1), row_weights.to_vec()).unwrap();
    let w = g.constant(w);
    let weighted = g.mul(picked, w);
    let total = g.sum_all(weighted);
    g.scale(total, -1.0 / batch as f64)
}

/// Per-step `B x V` constants from per-element `len x V` matrices.
pub fn soft_steps(g: &mut Graph, seqs: &[Mat]) -> (Vec<Var>, Vec<usize>) {
    let batch = seqs.len();
    let lens: Vec<usize> = seqs.iter().map(|m| m.nrows()).collect();
    let steps = lens.iter().copied().max().unwrap_or(0);
    let vocab = seqs[0].ncols();
    let vars = (0..steps)
        .map(|t| {
            let m = Mat::from_shape_fn((batch, vocab), |(b, w)| {
                if t < lens[b] {
                    seqs[b][[t, w]]
                } else if w == PAD {
                    1.0
                } else {
                    0.0
                }
            });
            g.constant(m)
        })
        .collect();
    (vars, lens)
}

/// Builds the full generator objective on `g`. Discriminator parameters are
/// bound frozen, so gradients reach it only through the soft transfer.
pub fn generator_pass(
    g: &mut Graph,
    gen: &Generator,
    disc: &TextCnn,
    batch: &StyleBatch,
    source: &mut dyn RetrievalSource,
    weights: LossWeights,
    k: usize,
) -> Result<GeneratorPass> {
    g.freeze(&disc.store);
    let x = &batch.sentences;
    let lens = batch.lens();
    let enc_x = gen.encode(g, SeqInput::Tokens(x));
    let qx = g.value(enc_x.query).clone();

    let retrieved_rec = source.retrieve(Purpose::Reconstruct, &batch.source, x, &qx)?;
    let mem_rec = gen.retrieval_memory(g, &RetrievedBatch::new(&retrieved_rec, k));
    let lp_rec = gen.teacher_forced(g, &enc_x, &mem_rec, x);
    let rec = sequence_nll(g, &lp_rec, x);

    let retrieved_fwd = source.retrieve(Purpose::Forward, &batch.target, x, &qx)?;
    let mem_fwd = gen.retrieval_memory(g, &RetrievedBatch::new(&retrieved_fwd, k));
    let y: SoftSequence = gen.generate_soft(g, &enc_x, &mem_fwd, &lens, Feed::Soft);
    let self_transfer = gen.generate_soft(g, &enc_x, &mem_rec, &lens, Feed::Soft);

    let lp_adv = disc.log_probs(g, SeqInput::Soft { steps: &y.probs, lens: &lens });
    let adv = weighted_class_nll(g, lp_adv, &batch.target, &vec![1.0; x.len()], x.len());

    let enc_y = gen.encode(g, SeqInput::Soft { steps: &y.probs, lens: &lens });
    let cos = cosine_rows(g, enc_x.query, enc_y.query);
    let mean_cos = g.mean_all(cos);
    let one = g.constant(Mat::ones((1, 1)));
    let ret = g.sub(one, mean_cos);

    let y_tokens = y.argmax_tokens(g);
    let qy = g.value(enc_y.query).clone();
    let retrieved_bwd = source.retrieve(Purpose::Backward, &batch.source, &y_tokens, &qy)?;
    let mem_bwd = gen.retrieval_memory(g, &RetrievedBatch::new(&retrieved_bwd, k));
    let lp_cyc = gen.teacher_forced(g, &enc_y, &mem_bwd, x);
    let cyc = sequence_nll(g, &lp_cyc, x);

    let omega: Vec<_> = retrieved_fwd
        .iter()
        .zip(x)
        .map(|(r, s)| new_words(r, s))
        .collect();
    let omega_back: Vec<_> = retrieved_bwd
        .iter()
        .zip(&y_tokens)
        .map(|(r, s)| new_words(r, s))
        .collect();
    let fwd = bow_sum(g, &y.log_probs, &lens, &omega);
    let bwd = bow_sum(g, &lp_cyc, &lens, &omega_back);
    let both = g.add(fwd, bwd);
    let bow = g.scale(both, -0.5);

    let parts = [
        (rec, weights.rec),
        (cyc, weights.cyc),
        (adv, weights.adv),
        (ret, weights.ret),
        (bow, weights.bow),
    ];
    let mut total = g.scale(parts[0].0, parts[0].1);
    for &(v, w) in &parts[1..] {
        let s = g.scale(v, w);
        total = g.add(total, s);
    }

    Ok(GeneratorPass {
        rec,
        cyc,
        adv,
        ret,
        bow,
        total,
        transfer_soft: y.to_dense(g),
        self_soft: self_transfer.to_dense(g),
        retrieved_forward: retrieved_fwd,
        retrieved_backward: retrieved_bwd,
        transfer_tokens: y_tokens,
    })
}

/// Inputs of the discriminator objective for one batch.
pub struct DiscriminatorInputs<'a> {
    pub real: &'a [Vec<usize>],
    pub source: &'a [usize],
    pub target: &'a [usize],
    pub self_soft: &'a [Mat],
    pub transfer_soft: &'a [Mat],
    pub retrieved_forward: &'a [Vec<Vec<usize>>],
    pub retrieved_backward: &'a [Vec<Vec<usize>>],
}

/// `(c1, c2)` from classifier log-probabilities.
///
/// `fwd` rows belong to batch elements `fwd_owner`, likewise `bwd`.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_terms(
    g: &mut Graph,
    real: Var,
    self_transfer: Var,
    fake: Var,
    fwd: Option<Var>,
    fwd_owner: &[usize],
    bwd: Option<Var>,
    bwd_owner: &[usize],
    source: &[usize],
    target: &[usize],
    fake_class: usize,
) -> (Var, Var) {
    let batch = source.len();
    let ones = vec![1.0; batch];
    let a = weighted_class_nll(g, real, source, &ones, batch);
    let b = weighted_class_nll(g, self_transfer, source, &ones, batch);
    let c = weighted_class_nll(g, fake, &vec![fake_class; batch], &ones, batch);
    let ab = g.add(a, b);
    let c1 = g.add(ab, c);

    let set_term = |g: &mut Graph, lp: Option<Var>, owner: &[usize], styles: &[usize]| {
        let lp = lp?;
        let mut sizes = vec![0usize; batch];
        for &o in owner {
            sizes[o] += 1;
        }
        let classes: Vec<usize> = owner.iter().map(|&o| styles[o]).collect();
        let w: Vec<f64> = owner.iter().map(|&o| 1.0 / sizes[o] as f64).collect();
        Some(weighted_class_nll(g, lp, &classes, &w, batch))
    };
    let f = set_term(g, fwd, fwd_owner, target);
    let bk = set_term(g, bwd, bwd_owner, source);
    let c2 = match (f, bk) {
        (Some(f), Some(b)) => g.add(f, b),
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => g.constant(Mat::zeros((1, 1))),
    };
    (c1, c2)
}

fn flatten(sets: &[Vec<Vec<usize>>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut seqs = Vec::new();
    let mut owner = Vec::new();
    for (b, set) in sets.iter().enumerate() {
        for s in set {
            seqs.push(s.clone());
            owner.push(b);
        }
    }
    (seqs, owner)
}

/// Builds `(c1, c2)` for the discriminator; generator outputs enter as
/// constants.
pub fn discriminator_pass(g: &mut Graph, disc: &TextCnn, inp: &DiscriminatorInputs<'_>) -> (Var, Var) {
    let fake_class = disc.classes() - 1;
    let real = disc.log_probs(g, SeqInput::Tokens(inp.real));
    let (steps, lens) = soft_steps(g, inp.self_soft);
    let self_lp = disc.log_probs(g, SeqInput::Soft { steps: &steps, lens: &lens });
    let (steps, lens) = soft_steps(g, inp.transfer_soft);
    let fake = disc.log_probs(g, SeqInput::Soft { steps: &steps, lens: &lens });
    let (fseqs, fown) = flatten(inp.retrieved_forward);
    let (bseqs, bown) = flatten(inp.retrieved_backward);
    let fwd = (!fseqs.is_empty()).then(|| disc.log_probs(g, SeqInput::Tokens(&fseqs)));
    let bwd = (!bseqs.is_empty()).then(|| disc.log_probs(g, SeqInput::Tokens(&bseqs)));
    discriminator_terms(
        g,
        real,
        self_lp,
        fake,
        fwd,
        &fown,
        bwd,
        &bown,
        inp.source,
        inp.target,
        fake_class,
    )
}
