//! The generator: shared embeddings and pooling weights, encoder, decoder.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{StyleWordStats, PAD};
use crate::decoder::{AttnMemory, Decoder, Feed, Generated, SoftSequence};
use crate::encoder::{EncodedBatch, Encoder, SeqInput};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    /// Per direction; the encoder state size is twice this.
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub attn: usize,
    pub max_len: usize,
}

impl ModelDims {
    /// Embedding 256, encoder state 512 (2 x 256), decoder state 512.
    pub fn standard(vocab: usize) -> Self {
        ModelDims {
            vocab,
            embed: 256,
            enc_hidden: 256,
            dec_hidden: 512,
            attn: 512,
            max_len: 32,
        }
    }

    pub fn enc_dim(&self) -> usize {
        2 * self.enc_hidden
    }
}

#[derive(Clone)]
pub struct Generator {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub embed: ParamId,
    pub alpha: ParamId,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// A batch of retrieved samples prepared for attention.
pub struct RetrievedBatch {
    /// Step-major `K * B` token sequences (row `k * B + b`).
    pub sequences: Vec<Vec<usize>>,
    /// `B x K` additive mask; masked slots hold filler sequences.
    pub mask: Mat,
    pub k: usize,
}

impl RetrievedBatch {
    /// `per_element[b]` holds up to `k` sequences for element `b`.
    pub fn new(per_element: &[Vec<Vec<usize>>], k: usize) -> Self {
        let batch = per_element.len();
        let mut sequences = Vec::with_capacity(k * batch);
        let mut mask = Mat::zeros((batch, k));
        for slot in 0..k {
            for (b, items) in per_element.iter().enumerate() {
                match items.get(slot) {
                    Some(s) => sequences.push(s.clone()),
                    None => {
                        sequences.push(items.first().cloned().unwrap_or_else(|| vec![PAD]));
                        mask[[b, slot]] = crate::autograd::MASK_NEG;
                    }
                }
            }
        }
        RetrievedBatch { sequences, mask, k }
    }
}

impl Generator {
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed = store.add_uniform("embed", dims.vocab, dims.embed, 0.1, rng);
        let alpha = store.add("alpha", Mat::ones((dims.vocab, 1)));
        let encoder = Encoder::new(&mut store, embed, alpha, dims.embed, dims.enc_hidden, rng);
        let decoder = Decoder::new(
            &mut store,
            embed,
            dims.embed,
            dims.enc_dim(),
            dims.dec_hidden,
            dims.attn,
            dims.vocab,
            rng,
        );
        Generator {
            dims,
            store,
            embed,
            alpha,
            encoder,
            decoder,
        }
    }

    /// Overwrites the pooling weights with the initial style statistics.
    pub fn set_alpha(&mut self, stats: &StyleWordStats) {
        let a = self.store.value_mut(self.alpha);
        for (w, &v) in stats.alpha.iter().enumerate() {
            a[[w, 0]] = v;
        }
    }

    pub fn alpha_values(&self) -> Vec<f64> {
        self.store.value(self.alpha).iter().copied().collect()
    }

    pub fn encode(&self, g: &mut Graph, input: SeqInput<'_>) -> EncodedBatch {
        self.encoder.encode(g, &self.store, input)
    }

    /// Encodes retrieved samples and builds the retrieval attention memory.
    pub fn retrieval_memory(&self, g: &mut Graph, retrieved: &RetrievedBatch) -> AttnMemory {
        let enc = self.encode(g, SeqInput::Tokens(&retrieved.sequences));
        self.decoder
            .retrieval_memory(g, &self.store, enc.final_state, retrieved.mask.clone())
    }

    pub fn source_memory(&self, g: &mut Graph, enc: &EncodedBatch) -> AttnMemory {
        self.decoder.source_memory(g, &self.store, enc)
    }

    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        enc: &EncodedBatch,
        retrieved: &AttnMemory,
        targets: &[Vec<usize>],
    ) -> Vec<Var> {
        let source = self.source_memory(g, enc);
        self.decoder
            .teacher_forced(g, &self.store, enc, &source, retrieved, targets)
    }

    pub fn generate_soft(
        &self,
        g: &mut Graph,
        enc: &EncodedBatch,
        retrieved: &AttnMemory,
        lens: &[usize],
        feed: Feed,
    ) -> SoftSequence {
        let source = self.source_memory(g, enc);
        self.decoder
            .generate_soft(g, &self.store, enc, &source, retrieved, lens, feed)
    }

    pub fn generate_greedy(
        &self,
        g: &mut Graph,
        enc: &EncodedBatch,
        retrieved: &AttnMemory,
        max_len: usize,
    ) -> Vec<Generated> {
        let source = self.source_memory(g, enc);
        self.decoder
            .generate_greedy(g, &self.store, enc, &source, retrieved, max_len)
    }

    /// Greedy transfer of `inputs` conditioned on retrieved samples.
    pub fn transfer(&self, inputs: &[Vec<usize>], retrieved: &[Vec<Vec<usize>>], k: usize) -> Vec<Generated> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, SeqInput::Tokens(inputs));
        let batch = RetrievedBatch::new(retrieved, k);
        let mem = self.retrieval_memory(&mut g, &batch);
        self.generate_greedy(&mut g, &enc, &mem, self.dims.max_len)
    }

    /// Pooled query embeddings (rows) for a batch of token sequences.
    pub fn query_embeddings(&self, inputs: &[Vec<usize>]) -> Mat {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, SeqInput::Tokens(inputs));
        g.value(enc.query).clone()
    }
}
