//! Convolutional text classifier with spectral normalization.
//!
//! Used with `M + 1` classes as the adversarial discriminator (class `M` is
//! "generated") and with `M` classes as the evaluation style classifier.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::PAD;
use crate::encoder::SeqInput;
use crate::nn::{step_major_ids, step_mask};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnDims {
    pub vocab: usize,
    pub embed: usize,
    pub widths: Vec<usize>,
    pub maps: usize,
    pub classes: usize,
}

impl CnnDims {
    /// Widths 1..=5 with 64 feature maps each.
    pub fn standard(vocab: usize, embed: usize, classes: usize) -> Self {
        CnnDims {
            vocab,
            embed,
            widths: vec![1, 2, 3, 4, 5],
            maps: 64,
            classes,
        }
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    width: usize,
    w: ParamId,
    b: ParamId,
}

/// Singular-vector estimates for one normalized weight.
#[derive(Debug, Clone)]
pub struct PowerState {
    pub param: ParamId,
    pub u: Mat,
    pub v: Mat,
}

#[derive(Clone)]
pub struct TextCnn {
    pub dims: CnnDims,
    pub store: ParamStore,
    pub embed: ParamId,
    convs: Vec<Conv>,
    out_w: ParamId,
    out_b: ParamId,
    power: Vec<PowerState>,
}

impl TextCnn {
    pub fn new<R: Rng>(dims: CnnDims, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed = store.add_uniform("embed", dims.vocab, dims.embed, 0.1, rng);
        let mut convs = Vec::new();
        for &w in &dims.widths {
            let fan_in = w * dims.embed;
            convs.push(Conv {
                width: w,
                w: store.add_uniform(
                    &format!("conv{w}.w"),
                    fan_in,
                    dims.maps,
                    1.0 / (fan_in as f64).sqrt(),
                    rng,
                ),
                b: store.add_zeros(&format!("conv{w}.b"), 1, dims.maps),
            });
        }
        let features = dims.maps * dims.widths.len();
        let out_w = store.add_uniform(
            "out.w",
            features,
            dims.classes,
            1.0 / (features as f64).sqrt(),
            rng,
        );
        let out_b = store.add_zeros("out.b", 1, dims.classes);
        let mut power = Vec::new();
        for id in convs.iter().map(|c| c.w).chain([out_w]) {
            let (r, c) = store.value(id).dim();
            power.push(PowerState {
                param: id,
                u: unit(Mat::from_shape_fn((r, 1), |_| rng.gen_range(-1.0..1.0))),
                v: unit(Mat::from_shape_fn((c, 1), |_| rng.gen_range(-1.0..1.0))),
            });
        }
        let mut cnn = TextCnn {
            dims,
            store,
            embed,
            convs,
            out_w,
            out_b,
            power,
        };
        cnn.warm_up(30);
        cnn
    }

    /// Rebuilds a classifier from a saved parameter archive. Power-iteration
    /// state is not archived; it restarts from a fixed vector and is warmed
    /// up again.
    pub fn from_store(store: ParamStore) -> crate::Result<Self> {
        let missing = |name: &str| crate::Error::Format(format!("classifier archive lacks `{name}`"));
        let embed = store.id("embed").ok_or_else(|| missing("embed"))?;
        let out_w = store.id("out.w").ok_or_else(|| missing("out.w"))?;
        let out_b = store.id("out.b").ok_or_else(|| missing("out.b"))?;
        let mut convs = Vec::new();
        for width in 1..=16 {
            if let (Some(w), Some(b)) = (
                store.id(&format!("conv{width}.w")),
                store.id(&format!("conv{width}.b")),
            ) {
                convs.push(Conv { width, w, b });
            }
        }
        let first = convs.first().ok_or_else(|| missing("conv*.w"))?;
        let (vocab, embed_dim) = store.value(embed).dim();
        let dims = CnnDims {
            vocab,
            embed: embed_dim,
            widths: convs.iter().map(|c| c.width).collect(),
            maps: store.value(first.w).ncols(),
            classes: store.value(out_w).ncols(),
        };
        let power = convs
            .iter()
            .map(|c| c.w)
            .chain([out_w])
            .map(|id| {
                let (r, c) = store.value(id).dim();
                PowerState {
                    param: id,
                    u: unit(Mat::ones((r, 1))),
                    v: unit(Mat::ones((c, 1))),
                }
            })
            .collect();
        let mut cnn = TextCnn {
            dims,
            store,
            embed,
            convs,
            out_w,
            out_b,
            power,
        };
        cnn.warm_up(30);
        Ok(cnn)
    }

    pub fn save(&self, path: &std::path::Path) -> crate::Result<()> {
        self.store.save(path)
    }

    pub fn load(path: &std::path::Path) -> crate::Result<Self> {
        Self::from_store(ParamStore::load(path)?)
    }

    pub fn classes(&self) -> usize {
        self.dims.classes
    }

    /// One power-iteration step for every normalized weight.
    pub fn power_iteration(&mut self) {
        for st in &mut self.power {
            let w = self.store.value(st.param);
            st.v = unit(w.t().dot(&st.u));
            st.u = unit(w.dot(&st.v));
        }
    }

    pub fn warm_up(&mut self, iterations: usize) {
        for _ in 0..iterations {
            self.power_iteration();
        }
    }

    pub fn power_states(&self) -> &[PowerState] {
        &self.power
    }

    /// Current estimate `u^T W v` of the top singular value of `param`.
    pub fn sigma_estimate(&self, param: ParamId) -> f64 {
        let st = self.power.iter().find(|p| p.param == param).expect("not normalized");
        st.u.t().dot(&self.store.value(param).dot(&st.v))[[0, 0]]
    }

    /// The normalized weight `W / sigma` as used in the forward pass.
    pub fn normalized_weight(&self, param: ParamId) -> Mat {
        self.store.value(param) / self.sigma_estimate(param)
    }

    fn sn(&self, g: &mut Graph, param: ParamId) -> Var {
        let st = self.power.iter().find(|p| p.param == param).unwrap();
        let w = g.param(&self.store, param);
        g.spectral_norm(w, &st.u, &st.v)
    }

    /// Class logits `B x classes`.
    pub fn logits(&self, g: &mut Graph, input: SeqInput<'_>) -> Var {
        let batch = input.batch(g);
        let lens = input.lens();
        let longest = lens.iter().copied().max().unwrap_or(1);
        let len = longest.max(self.dims.max_width());
        let embed = g.param(&self.store, self.embed);
        let embedded = match input {
            SeqInput::Tokens(seqs) => {
                let ids = step_major_ids(seqs, len, PAD);
                g.gather_rows(embed, &ids)
            }
            SeqInput::Soft { steps, lens } => {
                let vocab = g.value(steps[0]).ncols();
                let mut pad = Mat::zeros((batch, vocab));
                pad.column_mut(PAD).fill(1.0);
                let pad_var = g.constant(pad.clone());
                let mut rows = Vec::with_capacity(len);
                for t in 0..len {
                    if t < longest {
                        let mask = step_mask(lens, t);
                        rows.push(g.blend(steps[t], pad_var, &mask));
                    } else {
                        rows.push(pad_var);
                    }
                }
                let probs = g.concat_rows(&rows);
                g.matmul(probs, embed)
            }
        };
        let mut features = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let windows = g.unfold(embedded, batch, len, conv.width);
            let w = self.sn(g, conv.w);
            let b = g.param(&self.store, conv.b);
            let h = g.matmul(windows, w);
            let h = g.add_row(h, b);
            let h = g.relu(h);
            let valid: Vec<usize> = lens
                .iter()
                .map(|&l| (l + 1).saturating_sub(conv.width).max(1))
                .collect();
            features.push(g.max_pool_groups(h, len - conv.width + 1, &valid));
        }
        let feats = g.concat_cols(&features);
        let w = self.sn(g, self.out_w);
        let b = g.param(&self.store, self.out_b);
        let y = g.matmul(feats, w);
        g.add_row(y, b)
    }

    pub fn log_probs(&self, g: &mut Graph, input: SeqInput<'_>) -> Var {
        let l = self.logits(g, input);
        g.log_softmax_rows(l)
    }

    /// Most probable class per sequence.
    pub fn predict(&self, seqs: &[Vec<usize>]) -> Vec<usize> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let mut g = Graph::inference();
            let l = self.logits(&mut g, SeqInput::Tokens(chunk));
            out.extend(
                g.value(l)
                    .rows()
                    .into_iter()
                    .map(crate::decoder::argmax_row),
            );
        }
        out
    }

    /// Ids of every spectrally normalized weight.
    pub fn normalized_params(&self) -> Vec<ParamId> {
        self.power.iter().map(|p| p.param).collect()
    }
}

fn unit(m: Mat) -> Mat {
    let n = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    m / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TextCnn {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        TextCnn::new(
            CnnDims {
                vocab: 12,
                embed: 6,
                widths: vec![1, 2, 3],
                maps: 4,
                classes: 3,
            },
            &mut rng,
        )
    }

    #[test]
    fn softmax_of_logits_is_a_distribution() {
        let cnn = tiny();
        let mut g = Graph::inference();
        let seqs = vec![vec![4, 5, 6], vec![7], vec![8, 9, 10, 11, 4, 5]];
        let lp = cnn.log_probs(&mut g, SeqInput::Tokens(&seqs));
        for row in g.value(lp).rows() {
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_soft_rows_match_discrete_input() {
        let cnn = tiny();
        let seqs = vec![vec![4, 5, 6, 7], vec![9, 10]];
        let mut g = Graph::inference();
        let discrete = cnn.logits(&mut g, SeqInput::Tokens(&seqs));
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let steps: Vec<Var> = (0..4)
            .map(|t| {
                let m = Mat::from_shape_fn((2, 12), |(b, w)| {
                    // Garbage beyond each length must be ignored.
                    match seqs[b].get(t) {
                        Some(&id) => (id == w) as u8 as f64,
                        None => 1.0 / 12.0,
                    }
                });
                g.constant(m)
            })
            .collect();
        let soft = cnn.logits(&mut g, SeqInput::Soft { steps: &steps, lens: &lens });
        let diff = (g.value(discrete) - g.value(soft)).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn padding_does_not_change_logits() {
        let cnn = tiny();
        let mut g = Graph::inference();
        let alone = cnn.logits(&mut g, SeqInput::Tokens(&[vec![4, 5]]));
        let batched = cnn.logits(&mut g, SeqInput::Tokens(&[vec![4, 5], vec![6, 7, 8, 9, 10, 11, 4]]));
        let a = g.value(alone).row(0).to_owned();
        let b = g.value(batched).row(0).to_owned();
        assert!((a - b).iter().all(|d| d.abs() < 1e-12));
    }
}
