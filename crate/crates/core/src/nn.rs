//! Recurrent and linear layers expressed over the autodiff graph.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        Linear {
            w: store.add_uniform(&format!("{prefix}.w"), input, output, scale, rng),
            b: store.add_zeros(&format!("{prefix}.b"), 1, output),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// One LSTM layer; gate columns are ordered `[input, forget, cell, output]`.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add_uniform(&format!("{prefix}.w_ih"), input, 4 * hidden, scale, rng);
        let w_hh = store.add_uniform(&format!("{prefix}.w_hh"), hidden, 4 * hidden, scale, rng);
        let mut bias = Mat::zeros((1, 4 * hidden));
        // Forget gate starts open.
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let b = store.add(&format!("{prefix}.b"), bias);
        Lstm {
            w_ih,
            w_hh,
            b,
            hidden,
        }
    }

    /// Input projection plus bias for a stack of inputs.
    pub fn project_input(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w_ih);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// One step from a pre-projected input `B x 4H`. Returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, xw: Var, h: Var, c: Var) -> (Var, Var) {
        let w_hh = g.param(store, self.w_hh);
        let hw = g.matmul(h, w_hh);
        let z = g.add(xw, hw);
        let hc = g.lstm(z, c);
        let h = g.slice_cols(hc, 0, self.hidden);
        let c = g.slice_cols(hc, self.hidden, 2 * self.hidden);
        (h, c)
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> (Var, Var) {
        let h = g.constant(Mat::zeros((batch, self.hidden)));
        let c = g.constant(Mat::zeros((batch, self.hidden)));
        (h, c)
    }
}

/// Pads id sequences into a step-major id list of `len * batch` entries.
pub fn step_major_ids(seqs: &[Vec<usize>], len: usize, pad: usize) -> Vec<usize> {
    let batch = seqs.len();
    let mut ids = vec![pad; len * batch];
    for (b, s) in seqs.iter().enumerate() {
        for (t, &id) in s.iter().take(len).enumerate() {
            ids[t * batch + b] = id;
        }
    }
    ids
}

/// `B x 1` column with 1 where step `t` is inside element `b`'s length.
pub fn step_mask(lens: &[usize], t: usize) -> Mat {
    Mat::from_shape_fn((lens.len(), 1), |(b, _)| if t < lens[b] { 1.0 } else { 0.0 })
}

/// `B x T` additive softmax mask: 0 inside each length, large negative beyond.
pub fn score_mask(lens: &[usize], steps: usize) -> Mat {
    Mat::from_shape_fn((lens.len(), steps), |(b, t)| {
        if t < lens[b] {
            0.0
        } else {
            crate::autograd::MASK_NEG
        }
    })
}
