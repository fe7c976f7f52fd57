//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; `backward` accumulates
//! parameter gradients into a caller-owned [`Grads`] buffer so that a whole
//! minibatch can share one accumulator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

enum Op {
    Leaf,
    Param(ParamId),
    Detach,
    GatherParam(ParamId, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SegmentMean(Var, Vec<(usize, usize)>),
    SumAll(Var),
    Pick(Var, usize, usize),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Tensor,
    },
    ClampedNegLogDiff {
        a: Var,
        b: Var,
        active: bool,
    },
    SetNll {
        logits: Var,
        targets: Vec<Vec<usize>>,
        probs: Tensor,
        mass: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Dropout configuration of a graph in training mode.
struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

/// A single forward pass and its tape.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    dropout: Option<DropoutState>,
}

impl<'s> Graph<'s> {
    /// Evaluation-mode graph: dropout disabled, fully deterministic.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            dropout: None,
        }
    }

    /// Training-mode graph with inverted dropout at `rate`.
    pub fn with_dropout(store: &'s ParamStore, rate: f64, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        if rate > 0.0 {
            g.dropout = Some(DropoutState { rate, rng });
        }
        g
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).scalar()
    }

    // ----- leaves -------------------------------------------------------

    /// A constant input; receives no gradient outside the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows `ids` of a parameter table, e.g. an embedding lookup.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let src = self.store.get(table);
        let d = src.cols();
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        self.push(out, Op::GatherParam(table, ids.to_vec()))
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach)
    }

    // ----- shape ops ----------------------------------------------------

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros(ids.len(), src.cols());
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        self.push(out, Op::GatherRows(a, ids.to_vec()))
    }

    pub fn gather_cols(&mut self, a: Var, ids: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.rows(), ids.len());
        for r in 0..src.rows() {
            for (c, &i) in ids.iter().enumerate() {
                out.set(r, c, src.get(r, i));
            }
        }
        self.push(out, Op::GatherCols(a, ids.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "row slice out of range");
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::from_vec(len, cols, data), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "column slice out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Mean of rows within each `(start, len)` span; one output row per span.
    pub fn segment_mean(&mut self, a: Var, spans: &[(usize, usize)]) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(spans.len(), t.cols());
        for (o, &(start, len)) in spans.iter().enumerate() {
            assert!(len > 0 && start + len <= t.rows(), "bad span");
            let inv = 1.0 / len as f64;
            let row = out.row_mut(o);
            for r in start..start + len {
                for (acc, x) in row.iter_mut().zip(t.row(r)) {
                    *acc += x;
                }
            }
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        self.push(out, Op::SegmentMean(a, spans.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        self.segment_mean(a, &[(0, n)])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = self.value(a).get(r, c);
        self.push(Tensor::from_vec(1, 1, vec![v]), Op::Pick(a, r, c))
    }

    // ----- arithmetic ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(ta, false, tb, false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(ta, false, tb, true, &mut out, 0.0);
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let tb = self.value(b);
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), tb.shape());
        for (x, y) in out.data_mut().iter_mut().zip(tb.data()) {
            *x -= y;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let tr = self.value(row);
        let mut out = self.value(a).clone();
        assert_eq!(tr.rows(), 1);
        assert_eq!(tr.cols(), out.cols());
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let tb = self.value(b);
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), tb.shape());
        for (x, y) in out.data_mut().iter_mut().zip(tb.data()) {
            *x *= y;
        }
        self.push(out, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (e.g. a hard mask).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), c.shape());
        for (x, y) in out.data_mut().iter_mut().zip(c.data()) {
            *x *= y;
        }
        self.push(out, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, d) = tx.shape();
        assert_eq!(g.shape(), (1, d));
        assert_eq!(b.shape(), (1, d));
        let mut xhat = Tensor::zeros(rows, d);
        let mut out = Tensor::zeros(rows, d);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise softmax where position `(i, j)` with `j > i` is excluded.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let mut masked = self.value(a).clone();
        for r in 0..masked.rows() {
            for c in (r + 1)..masked.cols() {
                masked.set(r, c, f64::NEG_INFINITY);
            }
        }
        for r in 0..masked.rows() {
            softmax_in_place(masked.row_mut(r));
        }
        // Softmax backward only needs the output, so the masked entries (which
        // have zero probability) receive zero gradient automatically.
        self.push(masked, Op::Softmax(a))
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, a: Var) -> Var {
        let (rows, cols) = self.nodes_shape(a);
        let Some(state) = self.dropout.as_mut() else {
            return a;
        };
        let keep = 1.0 - state.rate;
        let mut mask = Tensor::zeros(rows, cols);
        for m in mask.data_mut() {
            if state.rng.random::<f64>() < keep {
                *m = 1.0 / keep;
            }
        }
        self.mul_const(a, mask)
    }

    fn nodes_shape(&self, a: Var) -> (usize, usize) {
        self.value(a).shape()
    }

    // ----- losses -------------------------------------------------------

    /// `-log softmax(logits)[target]` for a single-row `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), 1, "cross_entropy expects one row");
        let mut probs = t.clone();
        softmax_in_place(probs.data_mut());
        let lse = log_sum_exp(t.data());
        let loss = lse - t.data()[target];
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy { logits, target, probs },
        )
    }

    /// `-ln(max(a - b, eps))` for scalars; zero gradient on the clamped plateau.
    pub fn clamped_neg_log_diff(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let diff = self.scalar(a) - self.scalar(b);
        let active = diff > eps;
        let loss = -diff.max(eps).ln();
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::ClampedNegLogDiff { a, b, active },
        )
    }

    /// Mean over rows of `-ln Σ_{j ∈ targets[r]} softmax(logits[r])_j`.
    ///
    /// Used for the merged generation/copy distribution where one surface
    /// word can own several logit columns.
    pub fn set_nll(&mut self, logits: Var, targets: Vec<Vec<usize>>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), targets.len());
        let mut probs = t.clone();
        let mut mass = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for (r, tg) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            assert!(!tg.is_empty(), "empty target set");
            let m: f64 = tg.iter().map(|&j| row[j]).sum();
            // log-sum-exp over the target set keeps precision for tiny masses
            let lse_all = log_sum_exp(t.row(r));
            let sel: Vec<f64> = tg.iter().map(|&j| t.get(r, j)).collect();
            total += lse_all - log_sum_exp(&sel);
            mass.push(m);
        }
        let loss = total / targets.len() as f64;
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SetNll {
                logits,
                targets,
                probs,
                mass,
            },
        )
    }

    // ----- backward -----------------------------------------------------

    /// Backpropagates from the scalar `loss`, adding parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        self.backward_scaled(loss, 1.0, grads);
    }

    /// Backpropagates `seed · ∂loss/∂θ` into `grads`.
    pub fn backward_scaled(&self, loss: Var, seed: f64, grads: &mut Grads) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::from_vec(1, 1, vec![seed]));
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            self.backprop_node(i, &dy, &mut adj, grads);
        }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, adj: &mut [Option<Tensor>], grads: &mut Grads) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Param(id) => {
                let shape = self.store.get(*id).shape();
                grads.slot(*id, shape).add_assign(dy);
            }
            Op::GatherParam(id, ids) => {
                let shape = self.store.get(*id).shape();
                let g = grads.slot(*id, shape);
                for (r, &row) in ids.iter().enumerate() {
                    for (a, b) in g.row_mut(row).iter_mut().zip(dy.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::GatherRows(a, ids) => {
                let g = self.adj_slot(adj, *a);
                for (r, &row) in ids.iter().enumerate() {
                    for (x, b) in g.row_mut(row).iter_mut().zip(dy.row(r)) {
                        *x += b;
                    }
                }
            }
            Op::GatherCols(a, ids) => {
                let g = self.adj_slot(adj, *a);
                for r in 0..dy.rows() {
                    for (c, &col) in ids.iter().enumerate() {
                        let v = g.get(r, col) + dy.get(r, c);
                        g.set(r, col, v);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                gemm(dy, false, tb, true, self.adj_slot(adj, *a), 1.0);
                gemm(ta, true, dy, false, self.adj_slot(adj, *b), 1.0);
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                gemm(dy, false, tb, false, self.adj_slot(adj, *a), 1.0);
                gemm(dy, true, ta, false, self.adj_slot(adj, *b), 1.0);
            }
            Op::Add(a, b) => {
                self.adj_slot(adj, *a).add_assign(dy);
                self.adj_slot(adj, *b).add_assign(dy);
            }
            Op::Sub(a, b) => {
                self.adj_slot(adj, *a).add_assign(dy);
                let gb = self.adj_slot(adj, *b);
                for (x, y) in gb.data_mut().iter_mut().zip(dy.data()) {
                    *x -= y;
                }
            }
            Op::AddRow(a, row) => {
                self.adj_slot(adj, *a).add_assign(dy);
                let gr = self.adj_slot(adj, *row);
                for r in 0..dy.rows() {
                    for (x, y) in gr.data_mut().iter_mut().zip(dy.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = self.adj_slot(adj, *a);
                for ((x, y), z) in ga.data_mut().iter_mut().zip(dy.data()).zip(tb.data()) {
                    *x += y * z;
                }
                let gb = self.adj_slot(adj, *b);
                for ((x, y), z) in gb.data_mut().iter_mut().zip(dy.data()).zip(ta.data()) {
                    *x += y * z;
                }
            }
            Op::MulConst(a, c) => {
                let ga = self.adj_slot(adj, *a);
                for ((x, y), z) in ga.data_mut().iter_mut().zip(dy.data()).zip(c.data()) {
                    *x += y * z;
                }
            }
            Op::Scale(a, s) => {
                let ga = self.adj_slot(adj, *a);
                for (x, y) in ga.data_mut().iter_mut().zip(dy.data()) {
                    *x += y * s;
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let ga = self.adj_slot(adj, *a);
                for ((x, y), z) in ga.data_mut().iter_mut().zip(dy.data()).zip(ta.data()) {
                    *x += y * gelu_grad(*z);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).clone();
                let (rows, d) = xhat.shape();
                let mut dgamma = Tensor::zeros(1, d);
                let mut dbeta = Tensor::zeros(1, d);
                let mut dx = Tensor::zeros(rows, d);
                let n = d as f64;
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let dyr = dy.row(r);
                    let xh = xhat.row(r);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..d {
                        dgamma.data_mut()[c] += dyr[c] * xh[c];
                        dbeta.data_mut()[c] += dyr[c];
                        dxhat[c] = dyr[c] * g.data()[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * xh[c];
                    }
                    let k = inv_std[r] / n;
                    for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                        *out = k * (n * dxhat[c] - s1 - xh[c] * s2);
                    }
                }
                self.adj_slot(adj, *x).add_assign(&dx);
                self.adj_slot(adj, *gamma).add_assign(&dgamma);
                self.adj_slot(adj, *beta).add_assign(&dbeta);
            }
            Op::Softmax(a) => {
                let y = node.value.as_ref().expect("softmax value");
                let ga = self.adj_slot(adj, *a);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for ((x, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *x += p * (q - dot);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let cols = dy.cols();
                    let gp = self.adj_slot(adj, p);
                    for (x, y) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(&dy.data()[off * cols..(off + rows) * cols])
                    {
                        *x += y;
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let gp = self.adj_slot(adj, p);
                    for r in 0..dy.rows() {
                        for (x, y) in gp.row_mut(r).iter_mut().zip(&dy.row(r)[off..off + cols]) {
                            *x += y;
                        }
                    }
                    off += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let ga = self.adj_slot(adj, *a);
                for r in 0..dy.rows() {
                    for (x, y) in ga.row_mut(start + r).iter_mut().zip(dy.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let ga = self.adj_slot(adj, *a);
                let len = dy.cols();
                for r in 0..dy.rows() {
                    for (x, y) in ga.row_mut(r)[*start..start + len].iter_mut().zip(dy.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::SegmentMean(a, spans) => {
                let ga = self.adj_slot(adj, *a);
                for (o, &(start, len)) in spans.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    for r in start..start + len {
                        for (x, y) in ga.row_mut(r).iter_mut().zip(dy.row(o)) {
                            *x += y * inv;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let s = dy.scalar();
                for x in self.adj_slot(adj, *a).data_mut() {
                    *x += s;
                }
            }
            Op::Pick(a, r, c) => {
                let s = dy.scalar();
                let ga = self.adj_slot(adj, *a);
                let v = ga.get(*r, *c);
                ga.set(*r, *c, v + s);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let s = dy.scalar();
                let gl = self.adj_slot(adj, *logits);
                for (j, (x, p)) in gl.data_mut().iter_mut().zip(probs.data()).enumerate() {
                    let ind = if j == *target { 1.0 } else { 0.0 };
                    *x += s * (p - ind);
                }
            }
            Op::ClampedNegLogDiff { a, b, active } => {
                if *active {
                    let diff = self.scalar(*a) - self.scalar(*b);
                    let s = dy.scalar();
                    self.adj_slot(adj, *a).data_mut()[0] -= s / diff;
                    self.adj_slot(adj, *b).data_mut()[0] += s / diff;
                }
            }
            Op::SetNll {
                logits,
                targets,
                probs,
                mass,
            } => {
                let s = dy.scalar() / targets.len() as f64;
                let gl = self.adj_slot(adj, *logits);
                for (r, tg) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    let pr = probs.row(r);
                    for (x, p) in row.iter_mut().zip(pr) {
                        *x += s * p;
                    }
                    for &j in tg {
                        row[j] -= s * pr[j] / mass[r];
                    }
                }
            }
        }
    }

    fn adj_slot<'a>(&self, adj: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        let (r, c) = self.shape(v);
        adj[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Central-difference check of every parameter entry of `store`.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let mut grads = Grads::new(store);
        {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss, &mut grads);
        }
        let h = 1e-6;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let up = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).data_mut()[k] = orig - h;
                let down = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
                let tol = 1e-5 * numeric.abs().max(analytic.abs()) + 1e-8;
                assert!(
                    (numeric - analytic).abs() < tol,
                    "{}[{k}]: analytic {analytic} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    fn rand_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.add(n, Tensor::randn(r, c, 1.0, &mut rng)).unwrap();
        }
        s
    }

    #[test]
    fn matmul_family_gradients() {
        let mut s = rand_store(&[("a", 3, 4), ("b", 4, 2), ("c", 5, 4)], 1);
        check(&mut s, |g| {
            let (a, b, c) = (g.param(ParamId(0)), g.param(ParamId(1)), g.param(ParamId(2)));
            let ab = g.matmul(a, b);
            let ac = g.matmul_t(a, c);
            let x = g.gelu(ab);
            let y = g.softmax(ac);
            let z = g.concat_cols(&[x, y]);
            let w = g.mul(z, z);
            g.sum_all(w)
        });
    }

    #[test]
    fn layer_norm_and_shape_op_gradients() {
        let mut s = rand_store(&[("x", 4, 5), ("g", 1, 5), ("b", 1, 5), ("t", 3, 5)], 2);
        check(&mut s, |g| {
            let x = g.param(ParamId(0));
            let ln = {
                let (ga, be) = (g.param(ParamId(1)), g.param(ParamId(2)));
                g.layer_norm(x, ga, be)
            };
            let emb = g.embed(ParamId(3), &[2, 0, 2, 1]);
            let sum = g.add(ln, emb);
            let sm = g.causal_softmax(sum);
            let seg = g.segment_mean(sm, &[(0, 2), (1, 3)]);
            let rows = g.gather_rows(sum, &[3, 3, 0]);
            let sl = g.slice_rows(rows, 1, 2);
            let sc = g.slice_cols(sl, 1, 3);
            let cat = g.concat_rows(&[seg, x]);
            let row = g.slice_rows(ln, 0, 1);
            let br = g.add_row(cat, row);
            let d = g.sub(br, br);
            let e = g.scale(br, 0.3);
            let f = g.add(d, e);
            let q = g.mul(f, f);
            let s1 = g.sum_all(q);
            let gc = g.gather_cols(sc, &[2, 0, 2]);
            let gc = g.mul(gc, gc);
            let s2 = g.sum_all(gc);
            let p = g.pick(sc, 1, 2);
            let tot = g.add(s1, s2);
            g.add(tot, p)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut s = rand_store(&[("l", 1, 6), ("m", 3, 7)], 3);
        check(&mut s, |g| {
            let l = g.param(ParamId(0));
            let ce = g.cross_entropy(l, 4);
            let m = g.param(ParamId(1));
            let nll = g.set_nll(m, vec![vec![0, 3], vec![6], vec![1, 2, 5]]);
            let p = g.softmax(l);
            let a = g.pick(p, 0, 1);
            let b = g.pick(p, 0, 2);
            let big = g.scale(a, 5.0);
            let c = g.clamped_neg_log_diff(big, b, 1e-6);
            let t = g.add(ce, nll);
            g.add(t, c)
        });
    }

    #[test]
    fn clamp_plateau_has_zero_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::from_vec(1, 1, vec![0.2])).unwrap();
        let b = s.add("b", Tensor::from_vec(1, 1, vec![0.5])).unwrap();
        let mut grads = Grads::new(&s);
        let mut g = Graph::new(&s);
        let (va, vb) = (g.param(a), g.param(b));
        let l = g.clamped_neg_log_diff(va, vb, 1e-6);
        assert!((g.scalar(l) - 13.815_510_557_964_274).abs() < 1e-9);
        g.backward(l, &mut grads);
        assert_eq!(grads.get(a).map_or(0.0, |t| t.scalar()), 0.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::from_vec(1, 2, vec![1.0, 2.0])).unwrap();
        let mut grads = Grads::new(&s);
        let mut g = Graph::new(&s);
        let va = g.param(a);
        let d = g.detach(va);
        let l = g.sum_all(d);
        g.backward(l, &mut grads);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::filled(20, 20, 1.0)).unwrap();
        let mut g = Graph::new(&s);
        let va = g.param(a);
        assert_eq!(g.dropout(va), va);
        let mut g = Graph::with_dropout(&s, 0.5, ChaCha8Rng::seed_from_u64(0));
        let va = g.param(a);
        let d = g.dropout(va);
        let vals = g.value(d).data();
        assert!(vals.iter().all(|&x| x == 0.0 || x == 2.0));
        assert!(vals.contains(&0.0));
    }
}
