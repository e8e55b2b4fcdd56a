//! Style classifier used to score transfer accuracy.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Graph;
use crate::corpus::EncodedCorpus;
use crate::discriminator::{CnnDims, TextCnn};
use crate::encoder::SeqInput;
use crate::params::Adam;

/// Labelled `(sentence, style)` pairs of a corpus.
pub fn labelled(corpus: &EncodedCorpus) -> Vec<(Vec<usize>, usize)> {
    corpus
        .subsets
        .iter()
        .enumerate()
        .flat_map(|(style, s)| s.iter().map(move |x| (x.clone(), style)))
        .collect()
}

/// Percentage of sentences whose predicted style is their own.
pub fn classifier_accuracy(cnn: &TextCnn, corpus: &EncodedCorpus) -> f64 {
    let data = labelled(corpus);
    let seqs: Vec<Vec<usize>> = data.iter().map(|(s, _)| s.clone()).collect();
    let pred = cnn.predict(&seqs);
    let hits = pred.iter().zip(&data).filter(|(p, (_, y))| **p == *y).count();
    100.0 * hits as f64 / data.len().max(1) as f64
}

/// Trains an `M`-class classifier (`dims.classes` must equal the number of
/// styles) by minibatch cross-entropy.
pub fn train_classifier<R: Rng>(
    corpus: &EncodedCorpus,
    dims: CnnDims,
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> TextCnn {
    assert_eq!(dims.classes, corpus.num_styles());
    let mut cnn = TextCnn::new(dims, rng);
    let mut adam = Adam::new(&cnn.store, lr);
    let mut data = labelled(corpus);
    for _ in 0..epochs {
        data.shuffle(rng);
        for chunk in data.chunks(batch.max(1)) {
            cnn.power_iteration();
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|(s, _)| s.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|(_, y)| *y).collect();
            let mut g = Graph::new();
            let lp = cnn.log_probs(&mut g, SeqInput::Tokens(&seqs));
            let picked = g.pick_cols(lp, &labels);
            let total = g.sum_all(picked);
            let loss = g.scale(total, -1.0 / seqs.len() as f64);
            let grads = g.backward(loss);
            adam.apply(&mut cnn.store, &grads);
        }
    }
    cnn
}
