//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Every value is two-dimensional; scalars are `1 x 1` and vectors
//! are single rows or columns.
//!
//! Sequence batches use a *step-major* row layout: a stack of `T` steps of a
//! `B`-row batch stores step `t`, element `b` at row `t * B + b`.

use std::collections::{HashMap, HashSet};

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Additive mask value for excluded softmax positions.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    Lstm { gates: Var, c_prev: Var, cache: LstmCache },
    Blend { new: Var, old: Var, mask: Mat },
    AdditiveScores { query: Var, keys: Var, v: Var, act: Mat },
    WeightedSteps { weights: Var, values: Var },
    SpectralNorm { w: Var, u: Mat, v: Mat, sigma: f64 },
    MaxPoolGroups { a: Var, argmax: Vec<usize> },
    Unfold { a: Var, batch: usize, len: usize, width: usize },
}

struct LstmCache {
    i: Mat,
    f: Mat,
    g: Mat,
    o: Mat,
    tanh_c: Mat,
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the trainable parameters it touched.
#[derive(Default)]
pub struct Gradients {
    by_param: HashMap<(u64, ParamId), Mat>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&(store.uid(), id))
    }

    /// Gradients for every parameter of `store`, `None` where untouched.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Mat>> {
        store
            .ids()
            .map(|id| self.by_param.get(&(store.uid(), id)).cloned())
            .collect()
    }

    pub fn touches(&self, store: &ParamStore) -> bool {
        self.by_param.keys().any(|(uid, _)| *uid == store.uid())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
    frozen: HashSet<u64>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients for every bound parameter.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            params: HashMap::new(),
            frozen: HashSet::new(),
            track: true,
        }
    }

    /// A graph where parameters bind as constants; `backward` yields nothing.
    pub fn inference() -> Self {
        Graph {
            track: false,
            ..Self::new()
        }
    }

    /// Bind parameters of `store` as constants from now on.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.insert(store.uid());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.iter().all(|x| !x.is_nan()),
            "NaN produced by graph node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = self.track && !self.frozen.contains(&store.uid());
        let v = self.push(
            store.value(id).clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            trainable,
        );
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a` plus the `1 x c` row `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Scales each row of `a` by the matching entry of the column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    /// Elementwise quotient; `b` may also be a column broadcast across rows.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    /// Adds a constant matrix of the same shape (masks, offsets).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let value = self.value(a) + c;
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let ng = self.ng(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Row lookup: output row `i` is row `idx[i]` of `a` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Picks `a[i, idx[i]]` from each row into an `r x 1` column.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len());
        let value = Mat::from_shape_fn((idx.len(), 1), |(i, _)| src[[i, idx[i]]]);
        let ng = self.ng(a);
        self.push(value, Op::PickCols(a, idx.to_vec()), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        let data: Vec<f64> = src.iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("reshape must keep size");
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Sums across columns: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Sums across rows: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Fused LSTM pointwise update. `gates` is `B x 4H` in `[i, f, g, o]`
    /// order; the result is `B x 2H` holding `[h | c]`.
    pub fn lstm(&mut self, gates: Var, c_prev: Var) -> Var {
        let z = self.value(gates);
        let hidden = z.ncols() / 4;
        let i = z.slice(s![.., 0..hidden]).mapv(sigmoid);
        let f = z.slice(s![.., hidden..2 * hidden]).mapv(sigmoid);
        let g = z.slice(s![.., 2 * hidden..3 * hidden]).mapv(f64::tanh);
        let o = z.slice(s![.., 3 * hidden..]).mapv(sigmoid);
        let c = &f * self.value(c_prev) + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        let h = &o * &tanh_c;
        let value = ndarray::concatenate(Axis(1), &[h.view(), c.view()]).unwrap();
        let ng = self.ng(gates) || self.ng(c_prev);
        let cache = LstmCache { i, f, g, o, tanh_c };
        self.push(
            value,
            Op::Lstm {
                gates,
                c_prev,
                cache,
            },
            ng,
        )
    }

    /// `mask * new + (1 - mask) * old` with a constant `B x 1` mask column.
    pub fn blend(&mut self, new: Var, old: Var, mask: &Mat) -> Var {
        let n = self.value(new);
        let o = self.value(old);
        let value = n * mask + o * &mask.mapv(|m| 1.0 - m);
        let ng = self.ng(new) || self.ng(old);
        self.push(
            value,
            Op::Blend {
                new,
                old,
                mask: mask.clone(),
            },
            ng,
        )
    }

    /// Additive attention energies `e[b, t] = v^T tanh(query_b + keys_{t,b})`.
    ///
    /// `query` is `B x A` (already projected), `keys` is a step-major stack of
    /// `T * B` projected memory rows, `v` is `A x 1`. Returns `B x T`.
    pub fn additive_scores(&mut self, query: Var, keys: Var, v: Var) -> Var {
        let q = self.value(query);
        let k = self.value(keys);
        let vv = self.value(v);
        let batch = q.nrows();
        let steps = k.nrows() / batch;
        assert_eq!(steps * batch, k.nrows(), "keys rows must be T * B");
        let mut act = k.clone();
        for t in 0..steps {
            let mut block = act.slice_mut(s![t * batch..(t + 1) * batch, ..]);
            block += q;
            block.mapv_inplace(f64::tanh);
        }
        let e = act.dot(vv);
        let value = Mat::from_shape_fn((batch, steps), |(b, t)| e[[t * batch + b, 0]]);
        let ng = self.ng(query) || self.ng(keys) || self.ng(v);
        self.push(
            value,
            Op::AdditiveScores {
                query,
                keys,
                v,
                act,
            },
            ng,
        )
    }

    /// `out_b = sum_t weights[b, t] * values_{t,b}` over a step-major stack.
    pub fn weighted_steps(&mut self, weights: Var, values: Var) -> Var {
        let w = self.value(weights);
        let vals = self.value(values);
        let (batch, steps) = w.dim();
        assert_eq!(vals.nrows(), batch * steps, "values rows must be T * B");
        let mut value = Mat::zeros((batch, vals.ncols()));
        for t in 0..steps {
            let block = vals.slice(s![t * batch..(t + 1) * batch, ..]);
            let wt = w.column(t).insert_axis(Axis(1)).to_owned();
            value += &(&block * &wt);
        }
        let ng = self.ng(weights) || self.ng(values);
        self.push(value, Op::WeightedSteps { weights, values }, ng)
    }

    /// `w / sigma` where `sigma = u^T w v` for fixed singular-vector estimates.
    pub fn spectral_norm(&mut self, w: Var, u: &Mat, v: &Mat) -> Var {
        let wv = self.value(w);
        let sigma = u.t().dot(&wv.dot(v))[[0, 0]];
        let value = wv / sigma;
        let ng = self.ng(w);
        self.push(
            value,
            Op::SpectralNorm {
                w,
                u: u.clone(),
                v: v.clone(),
                sigma,
            },
            ng,
        )
    }

    /// Column-wise max over groups of rows. Group `g` covers rows
    /// `g * group_len .. g * group_len + valid[g]`.
    pub fn max_pool_groups(&mut self, a: Var, group_len: usize, valid: &[usize]) -> Var {
        let src = self.value(a);
        let groups = valid.len();
        assert_eq!(src.nrows(), groups * group_len);
        let cols = src.ncols();
        let mut value = Mat::zeros((groups, cols));
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            let n = valid[g].clamp(1, group_len);
            for c in 0..cols {
                let mut best = g * group_len;
                for r in g * group_len..g * group_len + n {
                    if src[[r, c]] > src[[best, c]] {
                        best = r;
                    }
                }
                value[[g, c]] = src[[best, c]];
                argmax[g * cols + c] = best;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::MaxPoolGroups { a, argmax }, ng)
    }

    /// Sliding windows over a step-major stack of `len * batch` rows.
    ///
    /// Output row `b * (len - width + 1) + t` concatenates input steps
    /// `t .. t + width` of element `b`.
    pub fn unfold(&mut self, a: Var, batch: usize, len: usize, width: usize) -> Var {
        assert!(width <= len, "window wider than sequence");
        let src = self.value(a);
        let dim = src.ncols();
        let windows = len - width + 1;
        let mut value = Mat::zeros((batch * windows, dim * width));
        for b in 0..batch {
            for t in 0..windows {
                let mut row = value.row_mut(b * windows + t);
                for k in 0..width {
                    row.slice_mut(s![k * dim..(k + 1) * dim])
                        .assign(&src.row((t + k) * batch + b));
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            value,
            Op::Unfold {
                a,
                batch,
                len,
                width,
            },
            ng,
        )
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut out = Gradients::default();
        if !self.ng(loss) {
            return out;
        }
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: &Mat, grads: &mut [Option<Mat>], out: &mut Gradients) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param { store, id } => {
                out.by_param
                    .entry((*store, *id))
                    .and_modify(|g| *g += gy)
                    .or_insert_with(|| gy.clone());
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, gy.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(gy));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, -gy);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, gy * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, gy * self.value(*a));
                }
            }
            Op::MulCol(a, col) => {
                if self.ng(*a) {
                    self.acc(grads, *a, gy * self.value(*col));
                }
                if self.ng(*col) {
                    let g = (gy * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *col, g);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    self.acc(grads, *a, gy / bv);
                }
                if self.ng(*b) {
                    let g = -(gy * y) / bv;
                    // Column divisor broadcast over the row.
                    let g = if g.dim() == bv.dim() {
                        g
                    } else {
                        g.sum_axis(Axis(1)).insert_axis(Axis(1))
                    };
                    self.acc(grads, *b, g);
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, gy * *k),
            Op::AddConst(a) => self.acc(grads, *a, gy.clone()),
            Op::Sigmoid(a) => self.acc(grads, *a, gy * &y.mapv(|s| s * (1.0 - s))),
            Op::Tanh(a) => self.acc(grads, *a, gy * &y.mapv(|t| 1.0 - t * t)),
            Op::Relu(a) => {
                let mut g = gy.clone();
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                self.acc(grads, *a, g);
            }
            Op::Exp(a) => self.acc(grads, *a, gy * y),
            Op::Log(a) => self.acc(grads, *a, gy / self.value(*a)),
            Op::Sqrt(a) => self.acc(grads, *a, gy / &(y * 2.0)),
            Op::SoftmaxRows(a) => {
                let dot = (gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                self.acc(grads, *a, y * &(gy - &dot));
            }
            Op::LogSoftmaxRows(a) => {
                let total = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                let p = y.mapv(f64::exp);
                self.acc(grads, *a, gy - &(p * &total));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        self.acc(grads, p, gy.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut g = Mat::zeros(src.dim());
                g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                self.acc(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        self.acc(grads, p, gy.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut g = Mat::zeros(src.dim());
                g.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(gy);
                self.acc(grads, *a, g);
            }
            Op::GatherRows(a, idx) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = g.row_mut(r);
                    row += &gy.row(i);
                }
                self.acc(grads, *a, g);
            }
            Op::PickCols(a, idx) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                for (i, &c) in idx.iter().enumerate() {
                    g[[i, c]] += gy[[i, 0]];
                }
                self.acc(grads, *a, g);
            }
            Op::Transpose(a) => self.acc(grads, *a, gy.t().to_owned()),
            Op::Reshape(a) => {
                let dim = self.value(*a).dim();
                let data: Vec<f64> = gy.iter().copied().collect();
                self.acc(grads, *a, Mat::from_shape_vec(dim, data).unwrap());
            }
            Op::SumAll(a) => {
                let g = Mat::from_elem(self.value(*a).dim(), gy[[0, 0]]);
                self.acc(grads, *a, g);
            }
            Op::SumCols(a) => {
                let dim = self.value(*a).dim();
                let g = Mat::from_shape_fn(dim, |(r, _)| gy[[r, 0]]);
                self.acc(grads, *a, g);
            }
            Op::SumRows(a) => {
                let dim = self.value(*a).dim();
                let g = Mat::from_shape_fn(dim, |(_, c)| gy[[0, c]]);
                self.acc(grads, *a, g);
            }
            Op::Lstm {
                gates,
                c_prev,
                cache,
            } => {
                let hidden = cache.i.ncols();
                let gh = gy.slice(s![.., 0..hidden]);
                let gc = gy.slice(s![.., hidden..]);
                let LstmCache { i, f, g, o, tanh_c } = cache;
                let dc = &gc + &(&gh * o * &tanh_c.mapv(|t| 1.0 - t * t));
                if self.ng(*gates) {
                    let d_o = &gh * tanh_c * &o.mapv(|s| s * (1.0 - s));
                    let d_i = &dc * g * &i.mapv(|s| s * (1.0 - s));
                    let d_f = &dc * self.value(*c_prev) * &f.mapv(|s| s * (1.0 - s));
                    let d_g = &dc * i * &g.mapv(|t| 1.0 - t * t);
                    let dz = ndarray::concatenate(
                        Axis(1),
                        &[d_i.view(), d_f.view(), d_g.view(), d_o.view()],
                    )
                    .unwrap();
                    self.acc(grads, *gates, dz);
                }
                if self.ng(*c_prev) {
                    self.acc(grads, *c_prev, &dc * f);
                }
            }
            Op::Blend { new, old, mask } => {
                if self.ng(*new) {
                    self.acc(grads, *new, gy * mask);
                }
                if self.ng(*old) {
                    self.acc(grads, *old, gy * &mask.mapv(|m| 1.0 - m));
                }
            }
            Op::AdditiveScores {
                query,
                keys,
                v,
                act,
            } => {
                let (batch, steps) = gy.dim();
                let vv = self.value(*v);
                // Broadcast the energy gradient to step-major rows.
                let ge = Mat::from_shape_fn((steps * batch, 1), |(r, _)| gy[[r % batch, r / batch]]);
                if self.ng(*v) {
                    self.acc(grads, *v, act.t().dot(&ge));
                }
                if self.ng(*query) || self.ng(*keys) {
                    let dpre = ge.dot(&vv.t()) * &act.mapv(|a| 1.0 - a * a);
                    if self.ng(*query) {
                        let mut dq = Mat::zeros((batch, act.ncols()));
                        for t in 0..steps {
                            dq += &dpre.slice(s![t * batch..(t + 1) * batch, ..]);
                        }
                        self.acc(grads, *query, dq);
                    }
                    if self.ng(*keys) {
                        self.acc(grads, *keys, dpre);
                    }
                }
            }
            Op::WeightedSteps { weights, values } => {
                let w = self.value(*weights);
                let vals = self.value(*values);
                let (batch, steps) = w.dim();
                if self.ng(*weights) {
                    let mut dw = Mat::zeros((batch, steps));
                    for t in 0..steps {
                        let block = vals.slice(s![t * batch..(t + 1) * batch, ..]);
                        let d = (&block * gy).sum_axis(Axis(1));
                        dw.column_mut(t).assign(&d);
                    }
                    self.acc(grads, *weights, dw);
                }
                if self.ng(*values) {
                    let mut dv = Mat::zeros(vals.dim());
                    for t in 0..steps {
                        let wt = w.column(t).insert_axis(Axis(1)).to_owned();
                        dv.slice_mut(s![t * batch..(t + 1) * batch, ..])
                            .assign(&(gy * &wt));
                    }
                    self.acc(grads, *values, dv);
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w);
                let inner = (gy * wv).sum();
                let g = gy / *sigma - &(u.dot(&v.t()) * (inner / (sigma * sigma)));
                self.acc(grads, *w, g);
            }
            Op::MaxPoolGroups { a, argmax } => {
                let src = self.value(*a);
                let cols = src.ncols();
                let mut g = Mat::zeros(src.dim());
                for (k, &r) in argmax.iter().enumerate() {
                    g[[r, k % cols]] += gy[[k / cols, k % cols]];
                }
                self.acc(grads, *a, g);
            }
            Op::Unfold {
                a,
                batch,
                len,
                width,
            } => {
                let src = self.value(*a);
                let dim = src.ncols();
                let windows = len - width + 1;
                let mut g = Mat::zeros(src.dim());
                for b in 0..*batch {
                    for t in 0..windows {
                        let row = gy.row(b * windows + t);
                        for k in 0..*width {
                            let mut dst = g.row_mut((t + k) * batch + b);
                            dst += &row.slice(s![k * dim..(k + 1) * dim]);
                        }
                    }
                }
                self.acc(grads, *a, g);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub fn log_softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}
