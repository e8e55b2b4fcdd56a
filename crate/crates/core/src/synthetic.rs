//! Templated two-style toy corpus.
//!
//! Every sentence fills a template with content nouns and style slots. The
//! two styles differ only in which side of a fixed substitution pair fills
//! each style slot, so a transfer model can learn the mapping from
//! non-parallel data, and every sentence has an exact reference in the other
//! style.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{corpus_paths, reference_paths, Split};
use crate::error::{Error, Result};

const NOUNS: &[&str] = &[
    "food", "service", "staff", "pizza", "burger", "coffee", "room", "waiter", "menu", "price",
    "salad", "pasta", "steak", "bread", "soup", "dessert", "owner", "bar", "patio", "music",
    "wine", "beer", "sushi", "tacos", "noodles", "chicken", "fries", "sandwich", "breakfast",
    "lunch", "dinner", "table", "manager", "hotel", "pool", "bed", "lobby", "shop", "store",
    "cake",
];

/// `(first style, second style)` adjective substitutions.
const ADJECTIVES: &[(&str, &str)] = &[
    ("good", "bad"),
    ("great", "terrible"),
    ("friendly", "rude"),
    ("delicious", "bland"),
    ("clean", "dirty"),
    ("fast", "slow"),
    ("fresh", "stale"),
    ("cheap", "overpriced"),
    ("amazing", "awful"),
    ("nice", "poor"),
];

const VERBS: &[(&str, &str)] = &[
    ("love", "hate"),
    ("recommend", "avoid"),
    ("enjoyed", "regretted"),
    ("like", "dislike"),
];

/// `N` noun, `A` adjective slot, `V` verb slot; other words are literal.
const TEMPLATES: &[&str] = &[
    "the N was A",
    "the N at this place was A",
    "i V the N they serve",
    "i V this place , the N was A",
    "the N and the N were A",
    "we V the N here every week",
    "their N is always A",
    "my friends V the N and the N",
    "the N here is A",
    "i think the N was A overall",
    "the N came with N and it was A",
    "overall the N is A",
];

/// One sentence rendered in both styles.
pub fn toy_pair<R: Rng>(rng: &mut R) -> [String; 2] {
    let template = TEMPLATES.choose(rng).unwrap();
    let mut out = [Vec::new(), Vec::new()];
    for slot in template.split(' ') {
        match slot {
            "N" => {
                let n = *NOUNS.choose(rng).unwrap();
                out[0].push(n);
                out[1].push(n);
            }
            "A" | "V" => {
                let table = if slot == "A" { ADJECTIVES } else { VERBS };
                let (a, b) = *table.choose(rng).unwrap();
                out[0].push(a);
                out[1].push(b);
            }
            lit => {
                out[0].push(lit);
                out[1].push(lit);
            }
        }
    }
    [out[0].join(" "), out[1].join(" ")]
}

/// `n` parallel pairs from `seed`.
pub fn toy_pairs(n: usize, seed: u64) -> Vec<[String; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| toy_pair(&mut rng)).collect()
}

/// Non-parallel subsets: each style draws its own sentences.
pub fn toy_corpus(per_style: usize, seed: u64) -> Vec<Vec<String>> {
    (0..2)
        .map(|style| {
            toy_pairs(per_style, seed.wrapping_mul(31).wrapping_add(style as u64))
                .into_iter()
                .map(|[a, b]| if style == 0 { a } else { b })
                .collect()
        })
        .collect()
}

/// The style-marking words of each style.
pub fn style_words(style: usize) -> Vec<&'static str> {
    ADJECTIVES
        .iter()
        .chain(VERBS)
        .map(|&(a, b)| if style == 0 { a } else { b })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub prefix: PathBuf,
    pub files: Vec<PathBuf>,
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<prefix>.{train,dev,test}.{0,1}` plus `<prefix>.ref.{0,1}`, where
/// line `i` of `ref.s` is the other-style rendering of line `i` of `test.s`.
pub fn write_toy_dataset(prefix: &Path, per_style: usize, test_per_style: usize, seed: u64) -> Result<ToyDataset> {
    let mut files = Vec::new();
    let train = toy_corpus(per_style, seed);
    for (path, lines) in corpus_paths(prefix, Split::Train, 2).into_iter().zip(&train) {
        write_lines(&path, lines)?;
        files.push(path);
    }
    let dev = toy_corpus(test_per_style, seed.wrapping_add(1_000_003));
    for (path, lines) in corpus_paths(prefix, Split::Dev, 2).into_iter().zip(&dev) {
        write_lines(&path, lines)?;
        files.push(path);
    }
    let tests = corpus_paths(prefix, Split::Test, 2);
    let refs = reference_paths(prefix, 2);
    for style in 0..2 {
        let pairs = toy_pairs(test_per_style, seed.wrapping_add(2_000_003 + style as u64));
        let inputs: Vec<String> = pairs.iter().map(|p| p[style].clone()).collect();
        let references: Vec<String> = pairs.iter().map(|p| p[1 - style].clone()).collect();
        write_lines(&tests[style], &inputs)?;
        write_lines(&refs[style], &references)?;
        files.push(tests[style].clone());
        files.push(refs[style].clone());
    }
    Ok(ToyDataset {
        prefix: prefix.to_path_buf(),
        files,
    })
}
