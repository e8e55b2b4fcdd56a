//! Bidirectional recurrent encoder and the style-independent query pooling.
//!
//! The encoder maps a sentence of `n` tokens to an `n x d` matrix of hidden
//! states (`d = 2 * enc_hidden`, forward and backward halves concatenated)
//! and pools those states into a query embedding
//! `q(x) = softmax([alpha(w_1), .., alpha(w_n)]) . H`.
//!
//! Inputs may be discrete ids or soft rows over the vocabulary; a soft row
//! embeds as the probability-weighted average embedding and contributes the
//! expected `alpha` at that position.

use ndarray::Array1;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::PAD;
use crate::nn::{score_mask, step_major_ids, step_mask, Lstm};
use crate::params::{ParamId, ParamStore};

/// A batch of sequences fed to the encoder.
#[derive(Clone, Copy)]
pub enum SeqInput<'a> {
    Tokens(&'a [Vec<usize>]),
    /// Per-step `B x V` probability rows plus the length of every element.
    Soft { steps: &'a [Var], lens: &'a [usize] },
}

impl SeqInput<'_> {
    pub fn batch(&self, g: &Graph) -> usize {
        match self {
            SeqInput::Tokens(seqs) => seqs.len(),
            SeqInput::Soft { steps, .. } => g.value(steps[0]).nrows(),
        }
    }

    pub fn lens(&self) -> Vec<usize> {
        match self {
            SeqInput::Tokens(seqs) => seqs.iter().map(Vec::len).collect(),
            SeqInput::Soft { lens, .. } => lens.to_vec(),
        }
    }
}

/// Encoder output for a batch.
pub struct EncodedBatch {
    pub batch: usize,
    pub steps: usize,
    pub lens: Vec<usize>,
    /// Step-major `T * B x d` hidden states.
    pub hidden: Var,
    /// `B x d`: last forward state concatenated with the first backward state.
    pub final_state: Var,
    /// `B x d` pooled query embeddings.
    pub query: Var,
    /// `B x T` softmax weights used for pooling.
    pub pool_weights: Var,
    /// `B x T` additive mask for attention over `hidden`.
    pub mask: Mat,
}

/// Dense view of one encoded sentence.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    /// `n x d`.
    pub hidden_states: Mat,
    pub query_embedding: Array1<f64>,
    pub final_state: Array1<f64>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.hidden_states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden_states.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    pub embed: ParamId,
    pub alpha: ParamId,
    pub forward: Lstm,
    pub backward: Lstm,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        embed: ParamId,
        alpha: ParamId,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Encoder {
            embed,
            alpha,
            forward: Lstm::new(store, "enc.fwd", embed_dim, hidden, rng),
            backward: Lstm::new(store, "enc.bwd", embed_dim, hidden, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// Encodes a batch. Every element must have length `>= 1`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: SeqInput<'_>) -> EncodedBatch {
        let batch = input.batch(g);
        let lens = input.lens();
        let steps = lens.iter().copied().max().unwrap_or(0);
        assert!(steps > 0 && lens.iter().all(|&l| l > 0), "empty sequence");
        let embed = g.param(store, self.embed);
        let alpha = g.param(store, self.alpha);

        let (embedded, alpha_bt) = match input {
            SeqInput::Tokens(seqs) => {
                let ids = step_major_ids(seqs, steps, PAD);
                let x = g.gather_rows(embed, &ids);
                let mut ids_bt = vec![PAD; batch * steps];
                for b in 0..batch {
                    for t in 0..steps {
                        ids_bt[b * steps + t] = ids[t * batch + b];
                    }
                }
                let a = g.gather_rows(alpha, &ids_bt);
                (x, g.reshape(a, batch, steps))
            }
            SeqInput::Soft { steps: rows, .. } => {
                let probs = g.concat_rows(&rows[..steps]);
                let x = g.matmul(probs, embed);
                let a = g.matmul(probs, alpha);
                let a = g.reshape(a, steps, batch);
                (x, g.transpose(a))
            }
        };

        let hidden = self.forward.hidden;
        let xf = self.forward.project_input(g, store, embedded);
        let xb = self.backward.project_input(g, store, embedded);
        let masks: Vec<Mat> = (0..steps).map(|t| step_mask(&lens, t)).collect();

        let (mut h, mut c) = self.forward.zero_state(g, batch);
        let mut fwd_out = Vec::with_capacity(steps);
        for (t, mask) in masks.iter().enumerate() {
            let xt = g.slice_rows(xf, t * batch, (t + 1) * batch);
            let (hn, cn) = self.forward.step(g, store, xt, h, c);
            h = g.blend(hn, h, mask);
            c = g.blend(cn, c, mask);
            fwd_out.push(h);
        }
        let last_forward = h;

        let (mut h, mut c) = self.backward.zero_state(g, batch);
        let mut bwd_out = vec![h; steps];
        for t in (0..steps).rev() {
            let xt = g.slice_rows(xb, t * batch, (t + 1) * batch);
            let (hn, cn) = self.backward.step(g, store, xt, h, c);
            h = g.blend(hn, h, &masks[t]);
            c = g.blend(cn, c, &masks[t]);
            bwd_out[t] = h;
        }
        let first_backward = h;
        debug_assert_eq!(g.value(first_backward).ncols(), hidden);

        let per_step: Vec<Var> = (0..steps)
            .map(|t| g.concat_cols(&[fwd_out[t], bwd_out[t]]))
            .collect();
        let stacked = g.concat_rows(&per_step);
        let final_state = g.concat_cols(&[last_forward, first_backward]);

        let mask = score_mask(&lens, steps);
        let (pool_weights, query) = pool(g, alpha_bt, stacked, &mask);
        EncodedBatch {
            batch,
            steps,
            lens,
            hidden: stacked,
            final_state,
            query,
            pool_weights,
            mask,
        }
    }

    /// Encodes one sentence. Trailing pad ids are stripped.
    pub fn encode_sentence(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        vocab_size: usize,
        max_len: usize,
    ) -> crate::Result<EncodedSentence> {
        let tokens = strip_padding(tokens);
        validate_tokens(tokens, vocab_size, max_len)?;
        let mut g = Graph::inference();
        let seqs = vec![tokens.to_vec()];
        let enc = self.encode(&mut g, store, SeqInput::Tokens(&seqs));
        Ok(EncodedSentence {
            hidden_states: g.value(enc.hidden).clone(),
            query_embedding: g.value(enc.query).row(0).to_owned(),
            final_state: g.value(enc.final_state).row(0).to_owned(),
        })
    }
}

/// Masked softmax over `alpha` scores followed by a weighted sum of steps.
pub fn pool(g: &mut Graph, alpha_bt: Var, stacked: Var, mask: &Mat) -> (Var, Var) {
    let scores = g.add_const(alpha_bt, mask);
    let weights = g.softmax_rows(scores);
    let query = g.weighted_steps(weights, stacked);
    (weights, query)
}

/// `q = softmax(alpha_i) . H` for one sentence, where `alpha_i` is the weight
/// of the `i`-th token.
pub fn pool_query(hidden_states: &Mat, tokens: &[usize], alpha: &[f64]) -> Array1<f64> {
    assert_eq!(hidden_states.nrows(), tokens.len());
    let mut g = Graph::inference();
    let scores = Mat::from_shape_fn((1, tokens.len()), |(_, t)| alpha[tokens[t]]);
    let a = g.constant(scores);
    let h = g.constant(hidden_states.clone());
    let (_, q) = pool(&mut g, a, h, &Mat::zeros((1, tokens.len())));
    g.value(q).row(0).to_owned()
}

pub fn strip_padding(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &tokens[..end]
}

pub fn validate_tokens(tokens: &[usize], vocab_size: usize, max_len: usize) -> crate::Result<()> {
    if tokens.is_empty() {
        return Err(crate::Error::EmptySequence);
    }
    if tokens.len() > max_len {
        return Err(crate::Error::TooLong {
            len: tokens.len(),
            max: max_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(crate::Error::TokenOutOfRange {
            id,
            size: vocab_size,
        });
    }
    Ok(())
}
