//! Forward LSTM language model used to initialize the generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{EncodedCorpus, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::nn::{step_major_ids, Linear, Lstm};
use crate::params::{Adam, ParamId, ParamStore};

const EVAL_BATCH: usize = 128;

pub struct LanguageModel {
    pub store: ParamStore,
    pub embed: ParamId,
    pub lstm: Lstm,
    pub out: Linear,
}

impl LanguageModel {
    pub fn new<R: Rng>(vocab: usize, embed_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed = store.add_uniform("embed", vocab, embed_dim, 0.1, rng);
        let lstm = Lstm::new(&mut store, "lm", embed_dim, hidden, rng);
        let out = Linear::new(&mut store, "lm.out", hidden, vocab, rng);
        LanguageModel {
            store,
            embed,
            lstm,
            out,
        }
    }

    /// Rebuilds the model around a loaded parameter archive.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Format(format!("language model archive lacks `{name}`")))
        };
        let embed = get("embed")?;
        let w_hh = get("lm.w_hh")?;
        let lstm = Lstm {
            w_ih: get("lm.w_ih")?,
            w_hh,
            b: get("lm.b")?,
            hidden: store.value(w_hh).nrows(),
        };
        let out = Linear {
            w: get("lm.out.w")?,
            b: get("lm.out.b")?,
        };
        Ok(LanguageModel {
            store,
            embed,
            lstm,
            out,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(ParamStore::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn vocab(&self) -> usize {
        self.store.value(self.embed).nrows()
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    pub fn embed_dim(&self) -> usize {
        self.store.value(self.embed).ncols()
    }

    /// Summed next-token NLL of `sentences` (each followed by `</s>`) and
    /// the number of predicted tokens.
    fn summed_nll(&self, g: &mut Graph, sentences: &[Vec<usize>]) -> (Var, usize) {
        let batch = sentences.len();
        let steps = sentences.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let inputs: Vec<Vec<usize>> = sentences
            .iter()
            .map(|s| std::iter::once(BOS).chain(s.iter().copied()).collect())
            .collect();
        let ids = step_major_ids(&inputs, steps, PAD);
        let e = g.param(&self.store, self.embed);
        let x = g.gather_rows(e, &ids);
        let xw = self.lstm.project_input(g, &self.store, x);
        let (mut h, mut c) = self.lstm.zero_state(g, batch);
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(xw, t * batch, (t + 1) * batch);
            (h, c) = self.lstm.step(g, &self.store, xt, h, c);
            hs.push(h);
        }
        let hs = g.concat_rows(&hs);
        let logits = self.out.forward(g, &self.store, hs);
        let lp = g.log_softmax_rows(logits);
        let mut targets = vec![PAD; steps * batch];
        let mut mask = Mat::zeros((steps * batch, 1));
        let mut count = 0;
        for (b, s) in sentences.iter().enumerate() {
            for t in 0..=s.len() {
                targets[t * batch + b] = if t < s.len() { s[t] } else { EOS };
                mask[[t * batch + b, 0]] = 1.0;
                count += 1;
            }
        }
        let picked = g.pick_cols(lp, &targets);
        let mask = g.constant(mask);
        let masked = g.mul(picked, mask);
        let total = g.sum_all(masked);
        (g.scale(total, -1.0), count)
    }

    /// Mean per-token NLL (end-of-sentence included).
    pub fn token_nll(&self, sentences: &[Vec<usize>]) -> f64 {
        let (mut total, mut count) = (0.0, 0);
        for chunk in sentences.chunks(EVAL_BATCH) {
            let mut g = Graph::inference();
            let (nll, n) = self.summed_nll(&mut g, chunk);
            total += g.scalar(nll);
            count += n;
        }
        total / count.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    /// Held-out per-token NLL before training.
    pub initial: f64,
    /// Held-out per-token NLL after each epoch.
    pub epochs: Vec<f64>,
}

/// Trains `lm` on the union of all style subsets. A held-out slice of
/// roughly 5% (at least one sentence) is used only for reporting.
pub fn pretrain_lm<R: Rng>(
    lm: &mut LanguageModel,
    corpus: &EncodedCorpus,
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> LmReport {
    let mut all: Vec<Vec<usize>> = corpus.subsets.iter().flatten().cloned().collect();
    all.shuffle(rng);
    let held = (all.len() / 20).max(1).min(all.len().saturating_sub(1));
    let heldout = all.split_off(all.len() - held);
    let mut adam = Adam::new(&lm.store, lr);
    let initial = lm.token_nll(&heldout);
    let mut report = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        all.shuffle(rng);
        for chunk in all.chunks(batch.max(1)) {
            let mut g = Graph::new();
            let (nll, n) = lm.summed_nll(&mut g, chunk);
            let loss = g.scale(nll, 1.0 / n as f64);
            let grads = g.backward(loss);
            adam.apply(&mut lm.store, &grads);
        }
        report.push(lm.token_nll(&heldout));
    }
    LmReport {
        initial,
        epochs: report,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

fn copy_into(gen: &mut Generator, name: &str, value: &Mat, report: &mut LoadReport) {
    match gen.store.id(name) {
        Some(id) if gen.store.value(id).dim() == value.dim() => {
            gen.store.value_mut(id).assign(value);
            report.loaded.push(name.to_string());
        }
        _ => report.skipped.push(name.to_string()),
    }
}

/// Copies language-model weights into the generator where shapes permit:
/// the shared embedding, the decoder recurrence and output layer (the input
/// projection only for its embedding rows), and the forward encoder
/// direction.
pub fn load_into_generator(lm: &LanguageModel, gen: &mut Generator) -> LoadReport {
    let mut report = LoadReport::default();
    let s = &lm.store;
    copy_into(gen, "embed", s.value(lm.embed), &mut report);

    // The decoder input is [embedding; source context; retrieval context].
    let w_ih = s.value(lm.lstm.w_ih);
    let dec_w_ih = gen.decoder.lstm.w_ih;
    let dst = gen.store.value(dec_w_ih);
    if dst.ncols() == w_ih.ncols() && dst.nrows() >= w_ih.nrows() {
        let rows = w_ih.nrows();
        gen.store
            .value_mut(dec_w_ih)
            .slice_mut(ndarray::s![..rows, ..])
            .assign(w_ih);
        report.loaded.push("dec.w_ih[embedding rows]".into());
    } else {
        report.skipped.push("dec.w_ih".into());
    }
    copy_into(gen, "dec.w_hh", s.value(lm.lstm.w_hh), &mut report);
    copy_into(gen, "dec.b", s.value(lm.lstm.b), &mut report);
    copy_into(gen, "out.w", s.value(lm.out.w), &mut report);
    copy_into(gen, "out.b", s.value(lm.out.b), &mut report);

    copy_into(gen, "enc.fwd.w_ih", w_ih, &mut report);
    copy_into(gen, "enc.fwd.w_hh", s.value(lm.lstm.w_hh), &mut report);
    copy_into(gen, "enc.fwd.b", s.value(lm.lstm.b), &mut report);
    report
}
