//! Joint adversarial training with periodic dense-index refresh.
//!
//! Each step samples a batch of `(sentence, source style, target style)`
//! triples, takes one generator update on the weighted objective (the
//! discriminator frozen), then one discriminator update on `c1 + c2` using
//! the generator outputs as constants. With the dense retriever every
//! style's index is re-embedded after each step `s` with
//! `s % refresh_interval == 0`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat};
use crate::config::TrainConfig;
use crate::corpus::{compute_alpha, EncodedCorpus, Vocabulary};
use crate::decoder::Generated;
use crate::discriminator::{CnnDims, TextCnn};
use crate::encoder::SeqInput;
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_pass, generator_pass, sequence_nll, DiscriminatorInputs, Purpose, RetrievalSource,
    StyleBatch,
};
use crate::model::{Generator, RetrievedBatch};
use crate::params::{Adam, ParamStore};
use crate::retriever::{refresh_dense_index, Query, RetrievalResult, Retriever, RetrieverKind};
use crate::run;

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub step: usize,
    pub rec: f64,
    pub cyc: f64,
    pub adv: f64,
    pub ret: f64,
    pub bow: f64,
    pub total: f64,
    pub c1: f64,
    pub c2: f64,
}

pub const LOG_HEADER: &str = "step\trec\tcyc\tadv\tret\tbow\tc1\tc2";

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.cyc, self.adv, self.ret, self.bow, self.total, self.c1, self.c2]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.rec, self.cyc, self.adv, self.ret, self.bow, self.c1, self.c2
        )
    }
}

/// Answers retrieval requests from a live [`Retriever`].
pub struct LiveRetrieval<'a> {
    pub retriever: &'a mut Retriever,
    pub k: usize,
}

impl RetrievalSource for LiveRetrieval<'_> {
    fn retrieve(
        &mut self,
        _: Purpose,
        styles: &[usize],
        tokens: &[Vec<usize>],
        embeddings: &Mat,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let mut out = Vec::with_capacity(tokens.len());
        for (b, (&style, t)) in styles.iter().zip(tokens).enumerate() {
            let row: Vec<f64> = embeddings.row(b).to_vec();
            let q = Query {
                tokens: t,
                embedding: Some(&row),
            };
            let r = self.retriever.retrieve(style, q, self.k)?;
            out.push(r.sentences(&self.retriever.pools[style]));
        }
        Ok(out)
    }
}

pub fn discriminator_dims(config: &TrainConfig, vocab: usize, num_styles: usize) -> CnnDims {
    CnnDims {
        vocab,
        embed: config.embed,
        widths: vec![1, 2, 3, 4, 5],
        maps: config.disc_maps,
        classes: num_styles + 1,
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub corpus: EncodedCorpus,
    pub generator: Generator,
    pub discriminator: TextCnn,
    pub retriever: Retriever,
    gen_opt: Adam,
    disc_opt: Adam,
    rng: ChaCha8Rng,
    /// Completed training steps.
    pub step: usize,
    /// Steps after which the dense indices were rebuilt (initial build excluded).
    pub refresh_steps: Vec<usize>,
}

impl Trainer {
    /// Builds fresh models. Training sentences must fit in `max_len`; longer
    /// ones are truncated.
    pub fn new(config: TrainConfig, corpus: EncodedCorpus, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let corpus = EncodedCorpus {
            subsets: corpus
                .subsets
                .into_iter()
                .map(|s| s.into_iter().map(|x| x[..x.len().min(config.max_len)].to_vec()).collect())
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut generator = Generator::new(config.model_dims(vocab_size), &mut rng);
        generator.set_alpha(&compute_alpha(&corpus, vocab_size));
        let discriminator = TextCnn::new(
            discriminator_dims(&config, vocab_size, corpus.num_styles()),
            &mut rng,
        );
        let retriever = Retriever::new(config.retriever, &corpus, rng.gen());
        let gen_opt = Adam::new(&generator.store, config.lr).with_clip(Some(config.clip));
        let disc_opt = Adam::new(&discriminator.store, config.lr).with_clip(Some(config.clip));
        let mut t = Trainer {
            config,
            corpus,
            generator,
            discriminator,
            retriever,
            gen_opt,
            disc_opt,
            rng,
            step: 0,
            refresh_steps: Vec::new(),
        };
        t.rebuild_dense();
        Ok(t)
    }

    /// Re-embeds every style subset with the current encoder (dense only).
    pub fn rebuild_dense(&mut self) {
        if self.retriever.kind != RetrieverKind::Dense {
            return;
        }
        let indices = self
            .retriever
            .pools
            .iter()
            .enumerate()
            .map(|(style, pool)| refresh_dense_index(&self.generator, &pool.sentences, style))
            .collect();
        self.retriever.swap_dense(indices);
    }

    pub fn refreshes(&self) -> usize {
        self.refresh_steps.len()
    }

    /// Uniform source style and sentence; target uniform over other styles.
    pub fn sample_batch(&mut self) -> StyleBatch {
        let m = self.corpus.num_styles();
        let mut batch = StyleBatch {
            sentences: Vec::with_capacity(self.config.batch),
            source: Vec::with_capacity(self.config.batch),
            target: Vec::with_capacity(self.config.batch),
        };
        for _ in 0..self.config.batch {
            let source = self.rng.gen_range(0..m);
            let subset = &self.corpus.subsets[source];
            let s = subset[self.rng.gen_range(0..subset.len())].clone();
            let offset = self.rng.gen_range(1..m);
            batch.sentences.push(s);
            batch.source.push(source);
            batch.target.push((source + offset) % m);
        }
        batch
    }

    /// One training step on a freshly sampled batch.
    pub fn train_step(&mut self) -> Result<LossBundle> {
        let batch = self.sample_batch();
        self.train_on(&batch)
    }

    /// One generator update and one discriminator update on `batch`.
    pub fn train_on(&mut self, batch: &StyleBatch) -> Result<LossBundle> {
        let step = self.step + 1;
        let k = self.config.k;
        let mut bundle = LossBundle {
            step,
            ..Default::default()
        };
        if self.step < self.config.warmup_steps {
            self.reconstruction_step(batch, &mut bundle)?;
        } else {
            let mut g = Graph::new();
            let mut source = LiveRetrieval {
                retriever: &mut self.retriever,
                k,
            };
            let pass = generator_pass(
                &mut g,
                &self.generator,
                &self.discriminator,
                batch,
                &mut source,
                self.config.weights,
                k,
            )?;
            bundle.rec = g.scalar(pass.rec);
            bundle.cyc = g.scalar(pass.cyc);
            bundle.adv = g.scalar(pass.adv);
            bundle.ret = g.scalar(pass.ret);
            bundle.bow = g.scalar(pass.bow);
            bundle.total = g.scalar(pass.total);
            check_finite(&bundle)?;
            let grads = g.backward(pass.total);
            self.gen_opt
                .apply(&mut self.generator.store, &grads);
            drop(g);

            self.discriminator.power_iteration();
            let mut g = Graph::new();
            let inputs = DiscriminatorInputs {
                real: &batch.sentences,
                source: &batch.source,
                target: &batch.target,
                self_soft: &pass.self_soft,
                transfer_soft: &pass.transfer_soft,
                retrieved_forward: &pass.retrieved_forward,
                retrieved_backward: &pass.retrieved_backward,
            };
            let (c1, c2) = discriminator_pass(&mut g, &self.discriminator, &inputs);
            bundle.c1 = g.scalar(c1);
            bundle.c2 = g.scalar(c2);
            check_finite(&bundle)?;
            let loss = g.add(c1, c2);
            let grads = g.backward(loss);
            self.disc_opt.apply(&mut self.discriminator.store, &grads);
        }
        self.step = step;
        if self.retriever.kind == RetrieverKind::Dense && step % self.config.refresh_interval == 0 {
            self.rebuild_dense();
            self.refresh_steps.push(step);
        }
        Ok(bundle)
    }

    fn reconstruction_step(&mut self, batch: &StyleBatch, bundle: &mut LossBundle) -> Result<()> {
        let k = self.config.k;
        let mut g = Graph::new();
        let enc = self.generator.encode(&mut g, SeqInput::Tokens(&batch.sentences));
        let q = g.value(enc.query).clone();
        let mut source = LiveRetrieval {
            retriever: &mut self.retriever,
            k,
        };
        let retrieved = source.retrieve(Purpose::Reconstruct, &batch.source, &batch.sentences, &q)?;
        let mem = self
            .generator
            .retrieval_memory(&mut g, &RetrievedBatch::new(&retrieved, k));
        let lp = self
            .generator
            .teacher_forced(&mut g, &enc, &mem, &batch.sentences);
        let rec = sequence_nll(&mut g, &lp, &batch.sentences);
        bundle.rec = g.scalar(rec);
        bundle.total = self.config.weights.rec * bundle.rec;
        check_finite(bundle)?;
        let loss = g.scale(rec, self.config.weights.rec);
        let grads = g.backward(loss);
        self.gen_opt
            .apply(&mut self.generator.store, &grads);
        Ok(())
    }

    /// Writes step-tagged generator and discriminator archives and moves the
    /// `latest` pointer.
    pub fn checkpoint(&self, run_dir: &Path) -> Result<String> {
        let dir = run_dir.join(run::CHECKPOINTS);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tag = run::step_tag(self.step);
        let (gen, disc) = run::checkpoint_paths(run_dir, &tag);
        self.generator.store.save(&gen)?;
        self.discriminator.save(&disc)?;
        run::set_latest(run_dir, &tag)?;
        Ok(tag)
    }

    /// Trains `steps` more steps, appending to the run's TSV log when
    /// `run_dir` is given and checkpointing every `checkpoint_every` steps
    /// and at the end. A non-finite loss stops training; the current
    /// parameters are saved under a `diagnostic` tag before the error
    /// is returned.
    pub fn run(&mut self, steps: usize, run_dir: Option<&Path>) -> Result<Vec<LossBundle>> {
        let mut log = match run_dir {
            Some(dir) => {
                let path = dir.join(run::TRAIN_LOG);
                let fresh = !path.exists();
                let f = File::options()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                let mut w = BufWriter::new(f);
                if fresh {
                    writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
                }
                Some((w, path))
            }
            None => None,
        };
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let bundle = match self.train_step() {
                Ok(b) => b,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = run_dir {
                        self.save_diagnostic(dir)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((w, path)) = log.as_mut() {
                writeln!(w, "{}", bundle.tsv_row()).map_err(|e| Error::io(path, e))?;
            }
            log::debug!("{}", bundle.tsv_row());
            history.push(bundle);
            if let Some(dir) = run_dir {
                if self.step % self.config.checkpoint_every == 0 {
                    if let Some((w, path)) = log.as_mut() {
                        w.flush().map_err(|e| Error::io(path, e))?;
                    }
                    self.checkpoint(dir)?;
                }
            }
        }
        if let Some((mut w, path)) = log {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let Some(dir) = run_dir {
            if steps > 0 && self.step % self.config.checkpoint_every != 0 {
                self.checkpoint(dir)?;
            }
        }
        Ok(history)
    }

    fn save_diagnostic(&self, run_dir: &Path) -> Result<()> {
        let dir = run_dir.join(run::CHECKPOINTS);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tag = format!("diagnostic-{}", run::step_tag(self.step + 1));
        let (gen, disc) = run::checkpoint_paths(run_dir, &tag);
        self.generator.store.save(&gen)?;
        self.discriminator.save(&disc)
    }
}

fn check_finite(b: &LossBundle) -> Result<()> {
    if b.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: b.step,
            detail: b.tsv_row(),
        })
    }
}

/// A generator restored from a run directory.
pub struct LoadedModel {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub generator: Generator,
    pub tag: String,
}

/// Loads the checkpoint `tag` (default: `latest`) of a run.
pub fn load_model(run_dir: &Path, tag: Option<&str>) -> Result<LoadedModel> {
    let manifest = run::RunManifest::load(run_dir)?;
    let vocab = Vocabulary::load(&run_dir.join(run::VOCAB))?;
    let tag = match tag {
        Some(t) => t.to_string(),
        None => run::latest_tag(run_dir)?,
    };
    let (gen_path, _) = run::checkpoint_paths(run_dir, &tag);
    let stored = ParamStore::load(&gen_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut generator = Generator::new(manifest.config.model_dims(vocab.len()), &mut rng);
    generator.store.load_values(&stored)?;
    Ok(LoadedModel {
        config: manifest.config,
        vocab,
        generator,
        tag,
    })
}

/// Transfers `inputs` to `target`, retrieving `k` samples of that style for
/// each. Returns the generated sentences and what was retrieved.
pub fn transfer_sentences(
    generator: &Generator,
    retriever: &mut Retriever,
    inputs: &[Vec<usize>],
    target: usize,
    k: usize,
) -> Result<Vec<(Generated, RetrievalResult)>> {
    if target >= retriever.num_styles() {
        return Err(Error::StyleOutOfRange {
            style: target,
            count: retriever.num_styles(),
        });
    }
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let q = generator.query_embeddings(chunk);
        let mut results = Vec::with_capacity(chunk.len());
        for (b, tokens) in chunk.iter().enumerate() {
            let row: Vec<f64> = q.row(b).to_vec();
            let query = Query {
                tokens,
                embedding: Some(&row),
            };
            results.push(retriever.retrieve(target, query, k)?);
        }
        let retrieved: Vec<Vec<Vec<usize>>> = results
            .iter()
            .map(|r| r.sentences(&retriever.pools[target]))
            .collect();
        let generated = generator.transfer(chunk, &retrieved, k);
        out.extend(generated.into_iter().zip(results));
    }
    Ok(out)
}
