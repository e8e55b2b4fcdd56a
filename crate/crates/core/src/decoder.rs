//! Attentional recurrent decoder over the source states and the retrieved
//! target-style samples.
//!
//! At step `t` the decoder attends with its previous state `h_{t-1}`:
//! `c^h_t` over the source hidden states and `c^u_t` over the retrieved
//! sample representations `U W_u` with query `h_{t-1} W_h`. The recurrent
//! input is `[embed(y_{t-1}); c^h_t; c^u_t]` and the output distribution is
//! `softmax(h_t O + o_b)`.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{BOS, EOS, PAD};
use crate::encoder::EncodedBatch;
use crate::nn::{step_major_ids, Linear, Lstm};
use crate::params::{ParamId, ParamStore};

/// Additive attention `e_j = v^T tanh(W_d h + W_e m_j)`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub w_d: ParamId,
    pub w_e: ParamId,
    pub v: ParamId,
}

/// Memory rows with their projected keys; see [`Attention::memory`].
pub struct AttnMemory {
    /// Step-major `T * B x m` rows averaged into the context.
    pub values: Var,
    /// `values . W_e`.
    pub keys: Var,
    /// `B x T` additive mask.
    pub mask: Mat,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        memory_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Attention {
            w_d: store.add_uniform(
                &format!("{prefix}.w_d"),
                query_dim,
                attn_dim,
                1.0 / (query_dim as f64).sqrt(),
                rng,
            ),
            w_e: store.add_uniform(
                &format!("{prefix}.w_e"),
                memory_dim,
                attn_dim,
                1.0 / (memory_dim as f64).sqrt(),
                rng,
            ),
            v: store.add_uniform(
                &format!("{prefix}.v"),
                attn_dim,
                1,
                1.0 / (attn_dim as f64).sqrt(),
                rng,
            ),
        }
    }

    pub fn memory(&self, g: &mut Graph, store: &ParamStore, values: Var, mask: Mat) -> AttnMemory {
        let w_e = g.param(store, self.w_e);
        let keys = g.matmul(values, w_e);
        AttnMemory { values, keys, mask }
    }

    /// Returns `(context B x m, weights B x T)`.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        memory: &AttnMemory,
    ) -> (Var, Var) {
        let w_d = g.param(store, self.w_d);
        let v = g.param(store, self.v);
        let q = g.matmul(query, w_d);
        let e = g.additive_scores(q, memory.keys, v);
        let e = g.add_const(e, &memory.mask);
        let weights = g.softmax_rows(e);
        let context = g.weighted_steps(weights, memory.values);
        (context, weights)
    }
}

#[derive(Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub t: usize,
}

pub struct StepOutput {
    /// `B x V` log-probabilities of the next token.
    pub log_probs: Var,
    pub source_weights: Var,
    pub retrieval_weights: Var,
}

/// How soft generation feeds its own output back as the next input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feed {
    /// Probability-weighted average embedding (differentiable).
    Soft,
    /// Embedding of the most probable token.
    Argmax,
}

/// Soft rollout: per-step distributions for every batch element.
pub struct SoftSequence {
    pub probs: Vec<Var>,
    pub log_probs: Vec<Var>,
    pub lens: Vec<usize>,
}

impl SoftSequence {
    /// Most probable token at each valid step.
    pub fn argmax_tokens(&self, g: &Graph) -> Vec<Vec<usize>> {
        (0..self.lens.len())
            .map(|b| {
                (0..self.lens[b])
                    .map(|t| argmax_row(g.value(self.probs[t]).row(b)))
                    .collect()
            })
            .collect()
    }

    /// Dense per-element `len x V` probability matrices.
    pub fn to_dense(&self, g: &Graph) -> Vec<Mat> {
        (0..self.lens.len())
            .map(|b| {
                let vocab = g.value(self.probs[0]).ncols();
                Mat::from_shape_fn((self.lens[b], vocab), |(t, w)| g.value(self.probs[t])[[b, w]])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub tokens: Vec<usize>,
    /// Hit `max_len` before emitting end-of-sentence.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    pub embed: ParamId,
    pub lstm: Lstm,
    pub bridge: Linear,
    pub source_attn: Attention,
    pub retrieval_attn: Attention,
    pub w_h: ParamId,
    pub w_u: ParamId,
    pub out: Linear,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        embed: ParamId,
        embed_dim: usize,
        enc_dim: usize,
        hidden: usize,
        attn_dim: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        Decoder {
            embed,
            lstm: Lstm::new(store, "dec", embed_dim + 2 * enc_dim, hidden, rng),
            bridge: Linear::new(store, "bridge", enc_dim, hidden, rng),
            source_attn: Attention::new(store, "attn.src", hidden, enc_dim, attn_dim, rng),
            retrieval_attn: Attention::new(store, "attn.ret", hidden, enc_dim, attn_dim, rng),
            w_h: store.add_uniform("attn.ret.w_h", hidden, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            w_u: store.add_uniform("attn.ret.w_u", enc_dim, enc_dim, 1.0 / (enc_dim as f64).sqrt(), rng),
            out: Linear::new(store, "out", hidden, vocab, rng),
        }
    }

    pub fn source_memory(&self, g: &mut Graph, store: &ParamStore, enc: &EncodedBatch) -> AttnMemory {
        self.source_attn.memory(g, store, enc.hidden, enc.mask.clone())
    }

    /// Memory over retrieved representations: `u` is a step-major `K * B x d`
    /// stack (row `k * B + b`), `mask` is `B x K`.
    pub fn retrieval_memory(&self, g: &mut Graph, store: &ParamStore, u: Var, mask: Mat) -> AttnMemory {
        let w_u = g.param(store, self.w_u);
        let values = g.matmul(u, w_u);
        self.retrieval_attn.memory(g, store, values, mask)
    }

    pub fn init_state(&self, g: &mut Graph, store: &ParamStore, enc: &EncodedBatch) -> DecoderState {
        let h = self.bridge.forward(g, store, enc.final_state);
        let c = g.constant(Mat::zeros((enc.batch, self.lstm.hidden)));
        DecoderState { h, c, t: 0 }
    }

    pub fn decode_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: DecoderState,
        input: Var,
        source: &AttnMemory,
        retrieved: &AttnMemory,
    ) -> (DecoderState, StepOutput) {
        let (ctx_h, source_weights) = self.source_attn.attend(g, store, state.h, source);
        let w_h = g.param(store, self.w_h);
        let hq = g.matmul(state.h, w_h);
        let (ctx_u, retrieval_weights) = self.retrieval_attn.attend(g, store, hq, retrieved);
        let x = g.concat_cols(&[input, ctx_h, ctx_u]);
        let xw = self.lstm.project_input(g, store, x);
        let (h, c) = self.lstm.step(g, store, xw, state.h, state.c);
        let logits = self.out.forward(g, store, h);
        let log_probs = g.log_softmax_rows(logits);
        (
            DecoderState {
                h,
                c,
                t: state.t + 1,
            },
            StepOutput {
                log_probs,
                source_weights,
                retrieval_weights,
            },
        )
    }

    fn embed_ids(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        let e = g.param(store, self.embed);
        g.gather_rows(e, ids)
    }

    /// Teacher forcing on `targets`: inputs `<s> y_1 .. y_n`, predictions for
    /// `y_1 .. y_n </s>`. Returns one `B x V` log-probability matrix per step
    /// (`max_len + 1` steps).
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedBatch,
        source: &AttnMemory,
        retrieved: &AttnMemory,
        targets: &[Vec<usize>],
    ) -> Vec<Var> {
        let batch = targets.len();
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let mut inputs: Vec<Vec<usize>> = Vec::with_capacity(batch);
        for t in targets {
            let mut v = Vec::with_capacity(t.len() + 1);
            v.push(BOS);
            v.extend_from_slice(t);
            inputs.push(v);
        }
        let ids = step_major_ids(&inputs, steps, PAD);
        let e = g.param(store, self.embed);
        let embedded = g.gather_rows(e, &ids);
        let mut state = self.init_state(g, store, enc);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = g.slice_rows(embedded, t * batch, (t + 1) * batch);
            let (next, step) = self.decode_step(g, store, state, x, source, retrieved);
            state = next;
            out.push(step.log_probs);
        }
        out
    }

    /// Soft rollout of `max(lens)` steps.
    pub fn generate_soft(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedBatch,
        source: &AttnMemory,
        retrieved: &AttnMemory,
        lens: &[usize],
        feed: Feed,
    ) -> SoftSequence {
        let batch = lens.len();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let mut state = self.init_state(g, store, enc);
        let mut input = self.embed_ids(g, store, &vec![BOS; batch]);
        let mut probs = Vec::with_capacity(steps);
        let mut log_probs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (next, step) = self.decode_step(g, store, state, input, source, retrieved);
            state = next;
            let p = g.exp(step.log_probs);
            input = match feed {
                Feed::Soft => {
                    let e = g.param(store, self.embed);
                    g.matmul(p, e)
                }
                Feed::Argmax => {
                    let ids: Vec<usize> =
                        g.value(p).rows().into_iter().map(argmax_row).collect();
                    self.embed_ids(g, store, &ids)
                }
            };
            probs.push(p);
            log_probs.push(step.log_probs);
        }
        SoftSequence {
            probs,
            log_probs,
            lens: lens.to_vec(),
        }
    }

    /// Greedy decoding until `</s>` or `max_len` tokens.
    pub fn generate_greedy(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedBatch,
        source: &AttnMemory,
        retrieved: &AttnMemory,
        max_len: usize,
    ) -> Vec<Generated> {
        let batch = enc.batch;
        let mut state = self.init_state(g, store, enc);
        let mut prev = vec![BOS; batch];
        let mut out: Vec<Generated> = (0..batch)
            .map(|_| Generated {
                tokens: Vec::new(),
                truncated: true,
            })
            .collect();
        let mut done = vec![false; batch];
        for _ in 0..max_len {
            let input = self.embed_ids(g, store, &prev);
            let (next, step) = self.decode_step(g, store, state, input, source, retrieved);
            state = next;
            let lp = g.value(step.log_probs);
            for b in 0..batch {
                let tok = argmax_row(lp.row(b));
                prev[b] = tok;
                if done[b] {
                    continue;
                }
                if tok == EOS {
                    done[b] = true;
                    out[b].truncated = false;
                } else {
                    out[b].tokens.push(tok);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        out
    }
}

pub fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::SeqInput;
    use crate::model::{Generator, ModelDims, RetrievedBatch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Generator {
        let dims = ModelDims {
            vocab: 20,
            embed: 8,
            enc_hidden: 4,
            dec_hidden: 8,
            attn: 8,
            max_len: 10,
        };
        Generator::new(dims, &mut ChaCha8Rng::seed_from_u64(3))
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn attention() -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 3, 4, 5, &mut ChaCha8Rng::seed_from_u64(0));
        (store, attn)
    }

    #[test]
    fn singleton_memory_gets_all_weight() {
        let (store, attn) = attention();
        let mut g = Graph::inference();
        let values = g.constant(random(1, 4, 1));
        let mem = attn.memory(&mut g, &store, values, Mat::zeros((1, 1)));
        let q = g.constant(random(1, 3, 2));
        let (ctx, w) = attn.attend(&mut g, &store, q, &mem);
        assert!((g.value(w)[[0, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(g.value(ctx), g.value(values));
    }

    #[test]
    fn attention_weights_are_distributions() {
        let (store, attn) = attention();
        let mut g = Graph::inference();
        // Two batch elements, six memory slots (step-major).
        let values = g.constant(random(12, 4, 3));
        let mem = attn.memory(&mut g, &store, values, Mat::zeros((2, 6)));
        let q = g.constant(random(2, 3, 4));
        let (_, w) = attn.attend(&mut g, &store, q, &mem);
        for row in g.value(w).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn context_gradient_matches_differences() {
        let (mut store, attn) = attention();
        let query = store.add("query", random(1, 3, 5));
        let memory = random(4, 4, 6);
        let probe = random(1, 4, 7);
        let loss = |g: &mut Graph, store: &ParamStore| {
            let values = g.constant(memory.clone());
            let mem = attn.memory(g, store, values, Mat::zeros((1, 4)));
            let q = g.param(store, query);
            let (ctx, _) = attn.attend(g, store, q, &mem);
            let r = g.constant(probe.clone());
            let p = g.mul(ctx, r);
            g.sum_all(p)
        };
        let mut g = Graph::new();
        let l = loss(&mut g, &store);
        let analytic = g.backward(l).get(&store, query).unwrap().clone();
        for c in 0..3 {
            let orig = store.value(query)[[0, c]];
            let h = 1e-5;
            store.value_mut(query)[[0, c]] = orig + h;
            let mut gp = Graph::inference();
            let v = loss(&mut gp, &store);
            let lp = gp.scalar(v);
            store.value_mut(query)[[0, c]] = orig - h;
            let mut gm = Graph::inference();
            let v = loss(&mut gm, &store);
            let lm = gm.scalar(v);
            store.value_mut(query)[[0, c]] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[[0, c]];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6) < 1e-4);
        }
    }

    /// Runs one decode step and returns `(distribution, source weights,
    /// retrieval weights)`.
    fn first_step(gen: &Generator, x: &[Vec<usize>], retrieved: &[Vec<Vec<usize>>], k: usize) -> (Mat, Mat, Mat) {
        let mut g = Graph::inference();
        let enc = gen.encode(&mut g, SeqInput::Tokens(x));
        let rb = RetrievedBatch::new(retrieved, k);
        let ret = gen.retrieval_memory(&mut g, &rb);
        let src = gen.source_memory(&mut g, &enc);
        let d = &gen.decoder;
        let state = d.init_state(&mut g, &gen.store, &enc);
        let input = d.embed_ids(&mut g, &gen.store, &vec![BOS; x.len()]);
        let (_, out) = d.decode_step(&mut g, &gen.store, state, input, &src, &ret);
        let p = g.exp(out.log_probs);
        (
            g.value(p).clone(),
            g.value(out.source_weights).clone(),
            g.value(out.retrieval_weights).clone(),
        )
    }

    #[test]
    fn step_outputs_are_distributions_and_deterministic() {
        let gen = tiny();
        let x = vec![vec![4, 5, 6], vec![7, 8]];
        let r = vec![vec![vec![9, 10], vec![11]], vec![vec![12, 13, 14], vec![15, 16]]];
        let (p, ws, wr) = first_step(&gen, &x, &r, 2);
        for m in [&p, &ws, &wr] {
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        assert_eq!(first_step(&gen, &x, &r, 2).0, p);
    }

    #[test]
    fn single_retrieved_sample_context_is_its_projection() {
        let gen = tiny();
        let d = &gen.decoder;
        let mut g = Graph::inference();
        let sample = vec![vec![9, 10, 11]];
        let rb = RetrievedBatch::new(&[sample.clone()], 1);
        let mem = gen.retrieval_memory(&mut g, &rb);
        let q = g.constant(random(1, 8, 9));
        let (ctx, w) = d.retrieval_attn.attend(&mut g, &gen.store, q, &mem);
        assert!((g.value(w)[[0, 0]] - 1.0).abs() < 1e-12);
        let enc = gen.encode(&mut g, SeqInput::Tokens(&sample));
        let w_u = g.param(&gen.store, d.w_u);
        let projected = g.matmul(enc.final_state, w_u);
        for (a, b) in g.value(ctx).iter().zip(g.value(projected)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieval_order_does_not_matter() {
        let gen = tiny();
        let x = vec![vec![4, 5, 6]];
        let a = vec![vec![9, 10], vec![11, 12, 13], vec![14]];
        let mut b = a.clone();
        b.rotate_left(1);
        b.swap(0, 1);
        let (pa, _, _) = first_step(&gen, &x, &[a], 3);
        let (pb, _, _) = first_step(&gen, &x, &[b], 3);
        for (u, v) in pa.iter().zip(&pb) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_equals_argmax_fed_soft_rollout() {
        let gen = tiny();
        let x = vec![vec![4, 5, 6, 7], vec![8, 9, 10, 11]];
        let r = vec![vec![vec![12, 13]], vec![vec![14, 15]]];
        let mut g = Graph::inference();
        let enc = gen.encode(&mut g, SeqInput::Tokens(&x));
        let mem = gen.retrieval_memory(&mut g, &RetrievedBatch::new(&r, 1));
        let soft = gen.generate_soft(&mut g, &enc, &mem, &[6, 6], Feed::Argmax);
        let rows = soft.argmax_tokens(&g);
        let greedy = gen.generate_greedy(&mut g, &enc, &mem, 6);
        for (b, out) in greedy.iter().enumerate() {
            let mut expected: Vec<usize> = rows[b].iter().copied().take_while(|&t| t != EOS).collect();
            expected.truncate(6);
            assert_eq!(out.tokens, expected);
            assert_eq!(out.truncated, !rows[b].contains(&EOS));
        }
    }

    fn with_eos_bias(bias: f64) -> Generator {
        let mut gen = tiny();
        let b = gen.decoder.out.b;
        gen.store.value_mut(b)[[0, EOS]] = bias;
        gen
    }

    #[test]
    fn one_step_budget_emits_one_token() {
        let gen = with_eos_bias(-100.0);
        let out = gen.transfer(&[vec![4, 5, 6]], &[vec![vec![7, 8]]], 1);
        let mut g = Graph::inference();
        let x = vec![vec![4, 5, 6]];
        let enc = gen.encode(&mut g, SeqInput::Tokens(&x));
        let mem = gen.retrieval_memory(&mut g, &RetrievedBatch::new(&[vec![vec![7, 8]]], 1));
        let one = gen.generate_greedy(&mut g, &enc, &mem, 1);
        assert_eq!(one[0].tokens.len(), 1);
        assert!(one[0].truncated);
        assert_eq!(one[0].tokens[0], out[0].tokens[0]);
    }

    #[test]
    fn generation_stops_at_end_of_sentence() {
        let gen = with_eos_bias(100.0);
        let out = gen.transfer(&[vec![4, 5, 6]], &[vec![vec![7, 8]]], 1);
        assert!(out[0].tokens.is_empty());
        assert!(!out[0].truncated);
    }
}
