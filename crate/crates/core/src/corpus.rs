//! Style-partitioned corpora, the shared vocabulary, and per-style word
//! statistics.
//!
//! Corpus files follow the `<prefix>.<split>.<style_index>` convention: plain
//! UTF-8, one pre-tokenized sentence per line.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub type Sentence = Vec<String>;

/// Lowercase and split on whitespace.
pub fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// Sentences partitioned into `M >= 2` single-style subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCorpus {
    pub style_names: Vec<String>,
    pub split: Split,
    pub subsets: Vec<Vec<Sentence>>,
}

impl StyleCorpus {
    pub fn new(style_names: Vec<String>, split: Split, subsets: Vec<Vec<Sentence>>) -> Result<Self> {
        if subsets.len() < 2 || subsets.len() != style_names.len() {
            return Err(Error::StyleCount {
                expected: style_names.len().max(2),
                got: subsets.len(),
            });
        }
        for (style, subset) in subsets.iter().enumerate() {
            if subset.is_empty() {
                return Err(Error::EmptySubset { style });
            }
            if subset.iter().any(|s| s.is_empty()) {
                return Err(Error::Format(format!("style {style} holds an empty sentence")));
            }
        }
        Ok(StyleCorpus {
            style_names,
            split,
            subsets,
        })
    }

    pub fn num_styles(&self) -> usize {
        self.subsets.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.subsets.iter().map(Vec::len).collect()
    }

    pub fn encode(&self, vocab: &Vocabulary) -> EncodedCorpus {
        EncodedCorpus {
            subsets: self
                .subsets
                .iter()
                .map(|s| s.iter().map(|sent| vocab.encode(sent)).collect())
                .collect(),
        }
    }
}

/// A corpus mapped to vocabulary ids, indexed `[style][sentence]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCorpus {
    pub subsets: Vec<Vec<Vec<usize>>>,
}

impl EncodedCorpus {
    pub fn num_styles(&self) -> usize {
        self.subsets.len()
    }

    pub fn sentence(&self, style: usize, id: usize) -> &[usize] {
        &self.subsets[style][id]
    }
}

/// `<prefix>.<split>.<style_index>` for each of `num_styles` styles.
pub fn corpus_paths(prefix: &Path, split: Split, num_styles: usize) -> Vec<PathBuf> {
    (0..num_styles)
        .map(|i| {
            let mut name = prefix.as_os_str().to_owned();
            name.push(format!(".{split}.{i}"));
            PathBuf::from(name)
        })
        .collect()
}

/// `<prefix>.ref.<style_index>`: human references for the test sentences of
/// each style, line-aligned with `<prefix>.test.<style_index>`.
pub fn reference_paths(prefix: &Path, num_styles: usize) -> Vec<PathBuf> {
    (0..num_styles)
        .map(|i| {
            let mut name = prefix.as_os_str().to_owned();
            name.push(format!(".ref.{i}"));
            PathBuf::from(name)
        })
        .collect()
}

/// Reads one file per style. Blank lines are skipped.
pub fn load_corpus(paths: &[PathBuf], style_names: &[String], split: Split) -> Result<StyleCorpus> {
    if paths.len() != style_names.len() {
        return Err(Error::StyleCount {
            expected: style_names.len(),
            got: paths.len(),
        });
    }
    let mut subsets = Vec::with_capacity(paths.len());
    for (style, path) in paths.iter().enumerate() {
        let lines = read_lines(path)?;
        let subset: Vec<Sentence> = lines
            .iter()
            .map(|l| tokenize(l))
            .filter(|s| !s.is_empty())
            .collect();
        if subset.is_empty() {
            return Err(Error::EmptySubset { style });
        }
        log::info!("{}: {} sentences ({split})", path.display(), subset.len());
        subsets.push(subset);
    }
    StyleCorpus::new(style_names.to_vec(), split, subsets)
}

/// Raw lines of a UTF-8 file, without terminators.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Dense token ids with four reserved entries at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps training-split words seen at least `min_count` times, most
    /// frequent first, ties broken lexicographically.
    pub fn build(corpus: &StyleCorpus, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sent in corpus.subsets.iter().flatten() {
            for tok in sent {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !RESERVED.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_words(words.into_iter().map(|(w, _)| w.to_string()))
    }

    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) if id >= RESERVED.len() => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens, stopping at end-of-sentence and dropping pad/bos.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One corpus token per line; line `n` (0-based) is id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for tok in &self.tokens[RESERVED.len()..] {
            writeln!(f, "{tok}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_words(read_lines(path)?))
    }
}

/// Per-word style counts, style ratios, and initial pooling weights.
#[derive(Debug, Clone)]
pub struct StyleWordStats {
    /// `counts[w][j]`: occurrences of word id `w` in style `j`.
    pub counts: Vec<Vec<f64>>,
    /// `alpha[w]` for every vocabulary id.
    pub alpha: Vec<f64>,
}

impl StyleWordStats {
    pub fn num_styles(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// Style ratios `c_j(w) / sum_k c_k(w)`, or `None` for unseen words.
    pub fn ratios(&self, word: usize) -> Option<Vec<f64>> {
        style_ratios(&self.counts[word])
    }
}

pub fn style_ratios(counts: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = counts.iter().sum();
    (total > 0.0).then(|| counts.iter().map(|c| c / total).collect())
}

/// `1 - sum_j |f_j - 1/M|`; a word with no counts is style-neutral (1).
pub fn alpha_from_counts(counts: &[f64]) -> f64 {
    let m = counts.len() as f64;
    match style_ratios(counts) {
        Some(f) => 1.0 - f.iter().map(|fj| (fj - 1.0 / m).abs()).sum::<f64>(),
        None => 1.0,
    }
}

/// Counts every id of the (training) corpus per style and derives `alpha`.
pub fn compute_alpha(corpus: &EncodedCorpus, vocab_size: usize) -> StyleWordStats {
    let m = corpus.num_styles();
    let mut counts = vec![vec![0.0; m]; vocab_size];
    for (style, subset) in corpus.subsets.iter().enumerate() {
        for &id in subset.iter().flatten() {
            counts[id][style] += 1.0;
        }
    }
    let alpha = counts.iter().map(|c| alpha_from_counts(c)).collect();
    StyleWordStats { counts, alpha }
}
