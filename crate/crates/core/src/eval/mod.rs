//! Automatic evaluation: style accuracy, self-BLEU, ref-BLEU, perplexity
//! under per-style 5-gram models, and their geometric mean.

mod bleu;
mod classifier;
mod ngram;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use bleu::{bleu, BleuStats, MAX_ORDER};
pub use classifier::{classifier_accuracy, labelled, train_classifier};
pub use ngram::{perplexity, sentence_nll, NGramLm, TokenLm, UniformLm};

use crate::corpus::{tokenize, Vocabulary, UNK};
use crate::discriminator::TextCnn;
use crate::error::{Error, Result};

pub const LM_ORDER: usize = 5;
pub const KN_DISCOUNT: f64 = 0.75;

/// `(acc * self_bleu * ref_bleu / ln ppl)^(1/4)` with percentage-scaled
/// inputs and the natural log.
pub fn geometric_mean(acc: f64, self_bleu: f64, ref_bleu: f64, ppl: f64) -> Result<f64> {
    if ppl.is_nan() || ppl <= 1.0 {
        return Err(Error::PerplexityTooLow(ppl));
    }
    Ok((acc * self_bleu * ref_bleu / ppl.ln()).powf(0.25))
}

/// Percentage of `generated` classified as the matching target style.
pub fn style_accuracy(
    generated: &[Vec<usize>],
    targets: &[usize],
    classifier: &TextCnn,
    num_styles: usize,
) -> Result<f64> {
    if classifier.classes() != num_styles {
        return Err(Error::ClassCount {
            classifier: classifier.classes(),
            styles: num_styles,
        });
    }
    if generated.len() != targets.len() {
        return Err(Error::LengthMismatch(generated.len(), targets.len()));
    }
    if generated.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // The classifier needs at least one token.
    let seqs: Vec<Vec<usize>> = generated
        .iter()
        .map(|s| if s.is_empty() { vec![UNK] } else { s.clone() })
        .collect();
    let pred = classifier.predict(&seqs);
    let hits = pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / generated.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub acc: f64,
    pub self_bleu: f64,
    /// Absent without references.
    pub ref_bleu: Option<f64>,
    pub ppl: f64,
    /// Absent without references or when `ppl <= 1`.
    pub gm: Option<f64>,
    pub count: usize,
}

/// One transferred sentence with what it is scored against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferItem {
    pub input: String,
    pub output: String,
    pub reference: Option<String>,
    pub target: usize,
}

/// Scores transferred sentences; the LM of each item's target style
/// measures fluency, pooled per token over the set.
pub fn score_items(
    items: &[TransferItem],
    vocab: &Vocabulary,
    classifier: &TextCnn,
    lms: &[NGramLm],
) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let outputs: Vec<Vec<String>> = items.iter().map(|i| tokenize(&i.output)).collect();
    let inputs: Vec<Vec<String>> = items.iter().map(|i| tokenize(&i.input)).collect();
    let ids: Vec<Vec<usize>> = outputs.iter().map(|o| vocab.encode(o)).collect();
    let targets: Vec<usize> = items.iter().map(|i| i.target).collect();
    let acc = style_accuracy(&ids, &targets, classifier, lms.len())?;
    let self_bleu = bleu(&outputs, &inputs)?;
    let ref_bleu = items
        .iter()
        .map(|i| i.reference.as_deref().map(tokenize))
        .collect::<Option<Vec<_>>>()
        .map(|refs| bleu(&outputs, &refs))
        .transpose()?;
    let (mut nll, mut tokens) = (0.0, 0usize);
    for (s, &t) in ids.iter().zip(&targets) {
        let lm = lms.get(t).ok_or(Error::StyleOutOfRange {
            style: t,
            count: lms.len(),
        })?;
        let (a, b) = sentence_nll(lm, s);
        nll += a;
        tokens += b;
    }
    let ppl = (nll / tokens as f64).exp();
    let gm = ref_bleu.and_then(|r| geometric_mean(acc, self_bleu, r, ppl).ok());
    Ok(MetricReport {
        acc,
        self_bleu,
        ref_bleu,
        ppl,
        gm,
        count: items.len(),
    })
}

/// One 5-gram model per style subset.
pub fn train_style_lms(subsets: &[Vec<Vec<usize>>]) -> Vec<NGramLm> {
    subsets
        .iter()
        .map(|s| NGramLm::train(s, LM_ORDER, KN_DISCOUNT))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionReport {
    pub source: usize,
    pub target: usize,
    pub report: MetricReport,
    pub generated: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub directions: Vec<DirectionReport>,
    pub pooled: MetricReport,
}

/// Target style evaluated for each source style: the next style, cyclically.
pub fn target_of(source: usize, num_styles: usize) -> usize {
    (source + 1) % num_styles
}

pub fn generated_path(dir: &Path, source: usize, target: usize) -> PathBuf {
    dir.join(format!("generated.{source}-{target}.txt"))
}

/// Transfers every test subset to its target style, writes the outputs
/// (one line per input) and `report.tsv` into `out_dir`, and returns the
/// per-direction and pooled scores.
pub fn evaluate(
    tests: &[Vec<String>],
    references: Option<&[Vec<String>]>,
    transfer: &mut dyn FnMut(&[String], usize) -> Result<Vec<String>>,
    vocab: &Vocabulary,
    classifier: &TextCnn,
    lms: &[NGramLm],
    out_dir: &Path,
) -> Result<EvaluationReport> {
    let m = tests.len();
    let mut all = Vec::new();
    let mut directions = Vec::new();
    for (source, inputs) in tests.iter().enumerate() {
        let target = target_of(source, m);
        let outputs = transfer(inputs, target)?;
        if outputs.len() != inputs.len() {
            return Err(Error::LengthMismatch(outputs.len(), inputs.len()));
        }
        let path = generated_path(out_dir, source, target);
        write_lines(&path, &outputs)?;
        let refs = references.map(|r| &r[source]);
        let items = make_items(inputs, &outputs, refs, target)?;
        let report = score_items(&items, vocab, classifier, lms)?;
        all.extend(items);
        directions.push(DirectionReport {
            source,
            target,
            report,
            generated: path,
        });
    }
    let pooled = score_items(&all, vocab, classifier, lms)?;
    let report = EvaluationReport { directions, pooled };
    std::fs::write(out_dir.join("report.tsv"), report_tsv(&report))
        .map_err(|e| Error::io(&out_dir.join("report.tsv"), e))?;
    Ok(report)
}

pub fn make_items(
    inputs: &[String],
    outputs: &[String],
    references: Option<&Vec<String>>,
    target: usize,
) -> Result<Vec<TransferItem>> {
    if let Some(r) = references {
        if r.len() != inputs.len() {
            return Err(Error::LengthMismatch(r.len(), inputs.len()));
        }
    }
    Ok(inputs
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (input, output))| TransferItem {
            input: input.clone(),
            output: output.clone(),
            reference: references.map(|r| r[i].clone()),
            target,
        })
        .collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub const REPORT_HEADER: &str = "direction\tacc\ts-bleu\tr-bleu\tppl\tgm";

/// TSV with one row per direction (`i->j`) and a pooled `all` row.
pub fn report_tsv(report: &EvaluationReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    let rows = report
        .directions
        .iter()
        .map(|d| (format!("{}->{}", d.source, d.target), &d.report))
        .chain(std::iter::once(("all".to_string(), &report.pooled)));
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{}\t{}",
            r.acc,
            r.self_bleu,
            opt(r.ref_bleu),
            r.ppl,
            opt(r.gm)
        );
    }
    out
}

/// Parses a report written by [`report_tsv`] into `(direction, fields)`.
pub fn parse_report(text: &str) -> Result<Vec<(String, [Option<f64>; 5])>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Format("report header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!("bad report row: {l}")));
            }
            let mut fields = [None; 5];
            for (f, c) in fields.iter_mut().zip(&cols[1..]) {
                *f = if *c == "NA" {
                    None
                } else {
                    Some(c.parse().map_err(|_| Error::Format(format!("bad number: {c}")))?)
                };
            }
            Ok((cols[0].to_string(), fields))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_mean_cases() {
        assert!((geometric_mean(1.0, 1.0, 1.0, std::f64::consts::E).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(geometric_mean(1.0, 1.0, 1.0, 1.0), Err(Error::PerplexityTooLow(_))));
        assert!(geometric_mean(1.0, 1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn report_round_trips() {
        let r = MetricReport {
            acc: 12.5,
            self_bleu: 33.333333333333336,
            ref_bleu: None,
            ppl: 7.25,
            gm: None,
            count: 3,
        };
        let e = EvaluationReport {
            directions: vec![DirectionReport {
                source: 0,
                target: 1,
                report: r,
                generated: PathBuf::new(),
            }],
            pooled: r,
        };
        let rows = parse_report(&report_tsv(&e)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, "0->1");
        assert_eq!(rows[1].1, [Some(12.5), Some(33.333333333333336), None, Some(7.25), None]);
    }
}
