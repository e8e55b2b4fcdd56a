//! File-level workflows behind the command-line tool: language-model
//! pretraining, training runs, transfer, retrieval, evaluation, and the
//! K sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::corpus::{
    corpus_paths, load_corpus, read_lines, reference_paths, tokenize, EncodedCorpus, Split,
    StyleCorpus, Vocabulary,
};
use crate::discriminator::{CnnDims, TextCnn};
use crate::error::{Error, Result};
use crate::eval::{self, classifier_accuracy, train_classifier, EvaluationReport, MetricReport};
use crate::lm::{load_into_generator, pretrain_lm, LanguageModel, LmReport, LoadReport};
use crate::model::Generator;
use crate::retriever::{refresh_dense_index, Query, RetrievalResult, Retriever, RetrieverKind};
use crate::run::{self, prepare_output_dir, RunManifest};
use crate::trainer::{load_model, transfer_sentences, LossBundle, Trainer};

pub const LM_CHECKPOINT: &str = "lm.ckpt";
pub const LM_REPORT: &str = "lm_report.tsv";
pub const CLASSIFIER: &str = "classifier.ckpt";
pub const CLASSIFIER_REPORT: &str = "classifier.tsv";
pub const SWEEP_REPORT: &str = "sweep.tsv";

pub fn style_names(num_styles: usize) -> Vec<String> {
    (0..num_styles).map(|i| i.to_string()).collect()
}

pub fn load_split(prefix: &Path, split: Split, num_styles: usize) -> Result<StyleCorpus> {
    load_corpus(
        &corpus_paths(prefix, split, num_styles),
        &style_names(num_styles),
        split,
    )
}

/// Raw non-blank lines of each test file.
pub fn load_test_lines(prefix: &Path, num_styles: usize) -> Result<Vec<Vec<String>>> {
    corpus_paths(prefix, Split::Test, num_styles)
        .iter()
        .map(|p| read_nonblank(p))
        .collect()
}

fn read_nonblank(path: &Path) -> Result<Vec<String>> {
    Ok(read_lines(path)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect())
}

/// References for every style, or `None` if any reference file is absent.
pub fn load_references(prefix: &Path, num_styles: usize) -> Result<Option<Vec<Vec<String>>>> {
    let paths = reference_paths(prefix, num_styles);
    if !paths.iter().all(|p| p.exists()) {
        return Ok(None);
    }
    paths.iter().map(|p| read_nonblank(p)).collect::<Result<_>>().map(Some)
}

/// Encodes a line for the model: unknown words map to `<unk>`, and the
/// sequence is cut at `max_len`.
pub fn encode_line(vocab: &Vocabulary, line: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(&tokenize(line));
    ids.truncate(max_len);
    ids
}

/// Builds the retriever of `kind` over `corpus`; dense indices are embedded
/// with `generator`.
pub fn build_retriever(
    kind: RetrieverKind,
    corpus: &EncodedCorpus,
    generator: &Generator,
    seed: u64,
) -> Retriever {
    let mut r = Retriever::new(kind, corpus, seed);
    if kind == RetrieverKind::Dense {
        let idx = r
            .pools
            .iter()
            .enumerate()
            .map(|(s, p)| refresh_dense_index(generator, &p.sentences, s))
            .collect();
        r.swap_dense(idx);
    }
    r
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains the forward language model on the union of the training subsets
/// and writes `vocab.txt`, `lm.ckpt`, `lm_report.tsv`, and the manifest.
pub fn pretrain_run(
    config: &TrainConfig,
    data: &Path,
    styles: usize,
    out: &Path,
    force: bool,
) -> Result<LmReport> {
    let corpus = load_split(data, Split::Train, styles)?;
    prepare_output_dir(out, force)?;
    let vocab = Vocabulary::build(&corpus, config.min_count);
    vocab.save(&out.join(run::VOCAB))?;
    RunManifest::new(
        "pretrain-lm",
        config,
        out,
        data,
        styles,
        &corpus_paths(data, Split::Train, styles),
    )?
    .save(out)?;
    let encoded = corpus.encode(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lm = LanguageModel::new(vocab.len(), config.embed, config.hidden, &mut rng);
    let report = pretrain_lm(&mut lm, &encoded, config.lm_epochs, config.batch, config.lm_lr, &mut rng);
    lm.save(&out.join(LM_CHECKPOINT))?;
    let mut tsv = String::from("epoch\theldout_nll\n");
    let _ = writeln!(tsv, "0\t{}", report.initial);
    for (i, nll) in report.epochs.iter().enumerate() {
        let _ = writeln!(tsv, "{}\t{}", i + 1, nll);
    }
    write_file(&out.join(LM_REPORT), &tsv)?;
    Ok(report)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub vocab: Vocabulary,
    pub history: Vec<LossBundle>,
    pub lm_load: Option<LoadReport>,
}

/// A full training run into `out`: manifest, vocabulary, loss log, and
/// checkpoints. `lm` optionally names a pretraining run directory or
/// language-model archive whose weights initialize the generator.
pub fn train_run(
    config: &TrainConfig,
    data: &Path,
    styles: usize,
    out: &Path,
    force: bool,
    lm: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus = load_split(data, Split::Train, styles)?;
    let lm = lm
        .map(|p| {
            let path = if p.is_dir() { p.join(LM_CHECKPOINT) } else { p.to_path_buf() };
            LanguageModel::load(&path)
        })
        .transpose()?;
    prepare_output_dir(out, force)?;
    let vocab = Vocabulary::build(&corpus, config.min_count);
    vocab.save(&out.join(run::VOCAB))?;
    RunManifest::new(
        "train",
        config,
        out,
        data,
        styles,
        &corpus_paths(data, Split::Train, styles),
    )?
    .save(out)?;
    let mut trainer = Trainer::new(config.clone(), corpus.encode(&vocab), vocab.len())?;
    let lm_load = match lm {
        Some(lm) => {
            if lm.vocab() != vocab.len() {
                return Err(Error::Format(format!(
                    "language model vocabulary has {} entries, corpus vocabulary {}",
                    lm.vocab(),
                    vocab.len()
                )));
            }
            let report = load_into_generator(&lm, &mut trainer.generator);
            trainer.rebuild_dense();
            Some(report)
        }
        None => None,
    };
    let history = trainer.run(config.steps, Some(out))?;
    Ok(TrainOutcome {
        trainer,
        vocab,
        history,
        lm_load,
    })
}

/// A trained model with the retriever over its training corpus.
pub struct Session {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub generator: Generator,
    pub retriever: Retriever,
    pub train: EncodedCorpus,
    pub manifest: RunManifest,
}

impl Session {
    pub fn open(run_dir: &Path, tag: Option<&str>) -> Result<Self> {
        let manifest = RunManifest::load(run_dir)?;
        let model = load_model(run_dir, tag)?;
        let train = load_split(&manifest.data, Split::Train, manifest.styles)?.encode(&model.vocab);
        let retriever = build_retriever(
            model.config.retriever,
            &train,
            &model.generator,
            model.config.seed,
        );
        Ok(Session {
            config: model.config,
            vocab: model.vocab,
            generator: model.generator,
            retriever,
            train,
            manifest,
        })
    }

    pub fn num_styles(&self) -> usize {
        self.manifest.styles
    }

    /// Transfers raw lines; blank lines stay blank and retrieve nothing.
    pub fn transfer_lines(
        &mut self,
        lines: &[String],
        target: usize,
    ) -> Result<Vec<(String, Option<RetrievalResult>)>> {
        if target >= self.num_styles() {
            return Err(Error::StyleOutOfRange {
                style: target,
                count: self.num_styles(),
            });
        }
        let encoded: Vec<(usize, Vec<usize>)> = lines
            .iter()
            .enumerate()
            .map(|(i, l)| (i, encode_line(&self.vocab, l, self.config.max_len)))
            .filter(|(_, ids)| !ids.is_empty())
            .collect();
        let inputs: Vec<Vec<usize>> = encoded.iter().map(|(_, ids)| ids.clone()).collect();
        let results = transfer_sentences(
            &self.generator,
            &mut self.retriever,
            &inputs,
            target,
            self.config.k,
        )?;
        let mut out: Vec<(String, Option<RetrievalResult>)> =
            lines.iter().map(|_| (String::new(), None)).collect();
        for ((i, _), (generated, retrieved)) in encoded.iter().zip(results) {
            out[*i] = (self.vocab.decode(&generated.tokens), Some(retrieved));
        }
        Ok(out)
    }

    /// Top-`k` sentences of `style` for a raw query line.
    pub fn retrieve_line(&mut self, line: &str, style: usize, k: usize) -> Result<RetrievalResult> {
        if style >= self.num_styles() {
            return Err(Error::StyleOutOfRange {
                style,
                count: self.num_styles(),
            });
        }
        let tokens = encode_line(&self.vocab, line, self.config.max_len);
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let q = self.generator.query_embeddings(std::slice::from_ref(&tokens));
        let row: Vec<f64> = q.row(0).to_vec();
        self.retriever.retrieve(
            style,
            Query {
                tokens: &tokens,
                embedding: Some(&row),
            },
            k,
        )
    }

    pub fn sentence(&self, style: usize, id: usize) -> String {
        self.vocab.decode(self.train.sentence(style, id))
    }
}

/// Transfers `input` line by line into `output`; with `provenance`, also
/// writes `line, rank, score, sentence` rows for every retrieved sample.
pub fn transfer_file(
    run_dir: &Path,
    tag: Option<&str>,
    input: &Path,
    target: usize,
    output: &Path,
    provenance: Option<&Path>,
    force: bool,
) -> Result<usize> {
    run::check_output_file(output, force)?;
    if let Some(p) = provenance {
        run::check_output_file(p, force)?;
    }
    if !input.exists() {
        return Err(Error::MissingFile(input.to_path_buf()));
    }
    let mut session = Session::open(run_dir, tag)?;
    let lines = read_lines(input)?;
    let results = session.transfer_lines(&lines, target)?;
    let mut text = String::new();
    let mut prov = String::from("line\trank\tscore\tsentence\n");
    for (i, (sentence, retrieved)) in results.iter().enumerate() {
        text.push_str(sentence);
        text.push('\n');
        if let Some(r) = retrieved {
            for (rank, (&id, score)) in r.ids.iter().zip(&r.scores).enumerate() {
                let _ = writeln!(
                    prov,
                    "{}\t{}\t{}\t{}",
                    i + 1,
                    rank + 1,
                    score,
                    session.sentence(target, id)
                );
            }
        }
    }
    write_file(output, &text)?;
    if let Some(p) = provenance {
        write_file(p, &prov)?;
    }
    Ok(lines.len())
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub classifier_epochs: usize,
    pub classifier_maps: usize,
    pub classifier_embed: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            classifier_epochs: 2,
            classifier_maps: 64,
            classifier_embed: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvaluationReport,
    /// Classifier accuracy on the real test sentences, in percent.
    pub classifier_accuracy: f64,
}

/// Trains the style classifier on the training split and checks it on the
/// real test sentences.
pub fn train_style_classifier(
    train: &EncodedCorpus,
    test: &EncodedCorpus,
    vocab_size: usize,
    options: EvalOptions,
    seed: u64,
) -> (TextCnn, f64) {
    let dims = CnnDims {
        maps: options.classifier_maps,
        ..CnnDims::standard(vocab_size, options.classifier_embed, train.num_styles())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_51f1);
    let cnn = train_classifier(train, dims, options.classifier_epochs, 64, 1e-3, &mut rng);
    let acc = classifier_accuracy(&cnn, test);
    (cnn, acc)
}

/// Evaluates the latest checkpoint of `run_dir` into `out`: a classifier
/// and per-style 5-gram models are fit on the training split, each test
/// subset is transferred, and generated files plus `report.tsv` are written.
pub fn evaluate_run(run_dir: &Path, out: &Path, force: bool, options: EvalOptions) -> Result<EvalOutcome> {
    let mut session = Session::open(run_dir, None)?;
    let m = session.num_styles();
    let data = session.manifest.data.clone();
    let tests = load_test_lines(&data, m)?;
    let references = load_references(&data, m)?;
    prepare_output_dir(out, force)?;

    let test_corpus = EncodedCorpus {
        subsets: tests
            .iter()
            .map(|lines| lines.iter().map(|l| session.vocab.encode(&tokenize(l))).collect())
            .collect(),
    };
    let (classifier, classifier_acc) = train_style_classifier(
        &session.train,
        &test_corpus,
        session.vocab.len(),
        options,
        session.config.seed,
    );
    classifier.save(&out.join(CLASSIFIER))?;
    write_file(
        &out.join(CLASSIFIER_REPORT),
        &format!("split\taccuracy\ntest\t{classifier_acc}\n"),
    )?;
    let lms = eval::train_style_lms(&session.train.subsets);
    let vocab = session.vocab.clone();
    let mut transfer = |lines: &[String], target: usize| -> Result<Vec<String>> {
        Ok(session
            .transfer_lines(lines, target)?
            .into_iter()
            .map(|(s, _)| s)
            .collect())
    };
    let report = eval::evaluate(
        &tests,
        references.as_deref(),
        &mut transfer,
        &vocab,
        &classifier,
        &lms,
        out,
    )?;
    Ok(EvalOutcome {
        report,
        classifier_accuracy: classifier_acc,
    })
}

/// Recomputes a report from generated files already on disk.
pub fn rescore(run_dir: &Path, eval_dir: &Path) -> Result<EvaluationReport> {
    let manifest = RunManifest::load(run_dir)?;
    let vocab = Vocabulary::load(&run_dir.join(run::VOCAB))?;
    let m = manifest.styles;
    let train = load_split(&manifest.data, Split::Train, m)?.encode(&vocab);
    let tests = load_test_lines(&manifest.data, m)?;
    let references = load_references(&manifest.data, m)?;
    let classifier = TextCnn::load(&eval_dir.join(CLASSIFIER))?;
    let lms = eval::train_style_lms(&train.subsets);
    let mut all = Vec::new();
    let mut directions = Vec::new();
    for (source, inputs) in tests.iter().enumerate() {
        let target = eval::target_of(source, m);
        let path = eval::generated_path(eval_dir, source, target);
        let outputs = read_lines(&path)?;
        let items = eval::make_items(inputs, &outputs, references.as_ref().map(|r| &r[source]), target)?;
        let report = eval::score_items(&items, &vocab, &classifier, &lms)?;
        all.extend(items);
        directions.push(eval::DirectionReport {
            source,
            target,
            report,
            generated: path,
        });
    }
    let pooled = eval::score_items(&all, &vocab, &classifier, &lms)?;
    Ok(EvaluationReport { directions, pooled })
}

/// Trains and evaluates one run per K under `out/k<K>` and writes a GM
/// table to `out/sweep.tsv`.
pub fn sweep_k(
    config: &TrainConfig,
    data: &Path,
    styles: usize,
    out: &Path,
    force: bool,
    ks: &[usize],
    options: EvalOptions,
) -> Result<Vec<(usize, MetricReport)>> {
    if ks.is_empty() {
        return Err(Error::ConfigValue {
            key: "k".into(),
            value: "empty list".into(),
        });
    }
    // Fail on a missing corpus before touching the output directory.
    load_split(data, Split::Train, styles)?;
    prepare_output_dir(out, force)?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = config.clone();
        c.k = k;
        let run_dir = sweep_run_dir(out, k);
        train_run(&c, data, styles, &run_dir, false, None)?;
        let outcome = evaluate_run(&run_dir, &run_dir.join("eval"), false, options)?;
        rows.push((k, outcome.report.pooled));
    }
    let mut tsv = String::from("k\tacc\ts-bleu\tr-bleu\tppl\tgm\n");
    for (k, r) in &rows {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        let _ = writeln!(
            tsv,
            "{k}\t{}\t{}\t{}\t{}\t{}",
            r.acc,
            r.self_bleu,
            opt(r.ref_bleu),
            r.ppl,
            opt(r.gm)
        );
    }
    write_file(&out.join(SWEEP_REPORT), &tsv)?;
    Ok(rows)
}

pub fn sweep_run_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("k{k}"))
}
