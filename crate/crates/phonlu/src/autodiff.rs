//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation applied while building a forward pass;
//! [`Tape::backward`] replays the record in reverse, accumulating gradients.
//! Nodes are append-only, so an operation's inputs always precede it and one
//! reverse sweep visits each node after all of its consumers.
//!
//! The op set is exactly what the phone-sequence models need: dense algebra,
//! pointwise nonlinearities, slicing and concatenation, row softmax, weighted
//! embedding lookup, an im2col unroll for one-dimensional convolution, layer
//! normalization, and a mean cross-entropy head. Everything is `f64`: these
//! models are small and exact finite-difference checks matter more here than
//! arithmetic throughput.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Tid, Tid),
    Add(Tid, Tid),
    AddRow(Tid, Tid),
    Mul(Tid, Tid),
    Scale(Tid, f64),
    Sigmoid(Tid),
    Tanh(Tid),
    Relu(Tid),
    Transpose(Tid),
    SliceRows(Tid, usize, usize),
    SliceCols(Tid, usize, usize),
    ConcatRows(Vec<Tid>),
    ConcatCols(Vec<Tid>),
    SoftmaxRows(Tid),
    SumAll(Tid),
    EmbedRows {
        table: Tid,
        rows: Vec<Vec<(usize, f64)>>,
    },
    Im2Col {
        input: Tid,
        kernel: usize,
    },
    LayerNorm {
        input: Tid,
        gamma: Tid,
        beta: Tid,
        eps: f64,
    },
    MeanCrossEntropy {
        logits: Tid,
        targets: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tid) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    pub fn grad(&self, t: Tid) -> &Array2<f64> {
        &self.nodes[t.0].grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Tid {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node {
            value,
            grad,
            op,
            needs_grad,
        });
        Tid(self.nodes.len() - 1)
    }

    fn needs(&self, t: Tid) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// Differentiable input (a parameter when `needs_grad`).
    pub fn leaf(&mut self, value: Array2<f64>, needs_grad: bool) -> Tid {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Non-differentiable input (data, masks).
    pub fn constant(&mut self, value: Array2<f64>) -> Tid {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul shape mismatch: {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::Matmul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    /// Adds a 1 x n row vector to every row of an m x n matrix.
    pub fn add_row(&mut self, a: Tid, row: Tid) -> Tid {
        let (m, n) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, n), "add_row shape mismatch");
        let broadcast = self
            .value(row)
            .broadcast((m, n))
            .expect("1 x n broadcasts over m x n")
            .to_owned();
        let value = self.value(a) + &broadcast;
        self.push(value, Op::AddRow(a, row), self.needs(a) || self.needs(row))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), self.needs(a))
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        let value = self.value(a).mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(value, Op::Sigmoid(a), self.needs(a))
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), self.needs(a))
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), self.needs(a))
    }

    pub fn transpose(&mut self, a: Tid) -> Tid {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), self.needs(a))
    }

    /// Rows `start..end`, half-open.
    pub fn slice_rows(&mut self, a: Tid, start: usize, end: usize) -> Tid {
        let (m, _) = self.value(a).dim();
        assert!(start < end && end <= m, "slice_rows {start}..{end} of {m}");
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, end), self.needs(a))
    }

    /// Columns `start..end`, half-open.
    pub fn slice_cols(&mut self, a: Tid, start: usize, end: usize) -> Tid {
        let (_, n) = self.value(a).dim();
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end), self.needs(a))
    }

    pub fn concat_rows(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&t| self.nodes[t.0].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts match");
        let needs = parts.iter().any(|&t| self.needs(t));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&t| self.nodes[t.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts match");
        let needs = parts.iter().any(|&t| self.needs(t));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Row-wise softmax with max-subtraction stabilization. Entries pushed to
    /// large negative values (masking) come out as exact zeros.
    pub fn softmax_rows(&mut self, a: Tid) -> Tid {
        let x = self.value(a);
        let mut value = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let sm = stable_softmax_row(row.as_slice().expect("contiguous row"));
            for (j, p) in sm.into_iter().enumerate() {
                value[[i, j]] = p;
            }
        }
        self.push(value, Op::SoftmaxRows(a), self.needs(a))
    }

    /// Sum of all entries, as a 1 x 1 matrix.
    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let total = self.value(a).sum();
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::SumAll(a), self.needs(a))
    }

    /// Output row i = sum over (index, weight) in `rows[i]` of
    /// weight * table[index]. Plain token lookup uses a single weight of 1;
    /// top-k recognizer frames use their renormalized scores.
    pub fn embed_rows(&mut self, table: Tid, rows: Vec<Vec<(usize, f64)>>) -> Tid {
        let (n_rows, dim) = self.value(table).dim();
        assert!(!rows.is_empty(), "embed_rows of no positions");
        let mut value = Array2::zeros((rows.len(), dim));
        for (i, entries) in rows.iter().enumerate() {
            assert!(!entries.is_empty(), "position {i} has no entries");
            for &(idx, w) in entries {
                assert!(idx < n_rows, "embedding index {idx} out of {n_rows}");
                let mut out_row = value.row_mut(i);
                out_row += &(&self.nodes[table.0].value.row(idx) * w);
            }
        }
        let needs = self.needs(table);
        self.push(value, Op::EmbedRows { table, rows }, needs)
    }

    /// Unrolls a T x E sequence into T x (kernel*E) windows with zero padding,
    /// so a same-length 1-d convolution becomes a single matmul. Odd kernels
    /// keep the windows centered on their positions.
    pub fn im2col(&mut self, input: Tid, kernel: usize) -> Tid {
        assert!(kernel % 2 == 1, "kernel must be odd for centered windows");
        let x = self.value(input);
        let (t_len, e) = x.dim();
        let pad = kernel / 2;
        let mut value = Array2::zeros((t_len, kernel * e));
        for t in 0..t_len {
            for j in 0..kernel {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < t_len {
                    value
                        .slice_mut(s![t, j * e..(j + 1) * e])
                        .assign(&x.row(src as usize));
                }
            }
        }
        let needs = self.needs(input);
        self.push(value, Op::Im2Col { input, kernel }, needs)
    }

    /// Row-wise layer normalization with learned gain and bias (each 1 x d).
    pub fn layer_norm(&mut self, input: Tid, gamma: Tid, beta: Tid, eps: f64) -> Tid {
        let x = self.value(input);
        let (_, d) = x.dim();
        assert_eq!(self.value(gamma).dim(), (1, d), "gamma shape");
        assert_eq!(self.value(beta).dim(), (1, d), "beta shape");
        let mut value = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let std = (var + eps).sqrt();
            for j in 0..d {
                let normalized = (row[j] - mean) / std;
                value[[i, j]] = self.nodes[gamma.0].value[[0, j]] * normalized
                    + self.nodes[beta.0].value[[0, j]];
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            },
            needs,
        )
    }

    /// Mean over `targets` of the cross-entropy between softmax(logits[row])
    /// and the one-hot class, as a 1 x 1 matrix. `targets` pairs are
    /// (row, class).
    pub fn mean_cross_entropy(&mut self, logits: Tid, targets: Vec<(usize, usize)>) -> Tid {
        assert!(!targets.is_empty(), "cross-entropy over no targets");
        let z = self.value(logits);
        let (m, n) = z.dim();
        let mut total = 0.0;
        for &(row, class) in &targets {
            assert!(row < m && class < n, "target ({row},{class}) out of {m}x{n}");
            let r = z.row(row);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[[row, class]];
        }
        let value = Array2::from_elem((1, 1), total / targets.len() as f64);
        let needs = self.needs(logits);
        self.push(value, Op::MeanCrossEntropy { logits, targets }, needs)
    }

    /// Accumulates d(loss)/d(node) into every node's `grad`. `loss` must be
    /// 1 x 1. Call once per tape.
    pub fn backward(&mut self, loss: Tid) {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        self.nodes[loss.0].grad[[0, 0]] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_step(i);
        }
    }

    fn backward_step(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = &node.grad;
        // Inputs that do not need gradients (constants, data) are skipped, so
        // their grads stay exactly zero.
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if before[a.0].needs_grad {
                    let da = g.dot(&before[b.0].value.t());
                    before[a.0].grad += &da;
                }
                if before[b.0].needs_grad {
                    let db = before[a.0].value.t().dot(g);
                    before[b.0].grad += &db;
                }
            }
            Op::Add(a, b) => {
                if before[a.0].needs_grad {
                    before[a.0].grad += g;
                }
                if before[b.0].needs_grad {
                    before[b.0].grad += g;
                }
            }
            Op::AddRow(a, row) => {
                if before[a.0].needs_grad {
                    before[a.0].grad += g;
                }
                if before[row.0].needs_grad {
                    let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    before[row.0].grad += &col_sums;
                }
            }
            Op::Mul(a, b) => {
                if before[a.0].needs_grad {
                    let da = g * &before[b.0].value;
                    before[a.0].grad += &da;
                }
                if before[b.0].needs_grad {
                    let db = g * &before[a.0].value;
                    before[b.0].grad += &db;
                }
            }
            Op::Scale(a, c) => {
                if before[a.0].needs_grad {
                    let da = g * *c;
                    before[a.0].grad += &da;
                }
            }
            Op::Sigmoid(a) => {
                if before[a.0].needs_grad {
                    let da = g * &(&node.value * &node.value.mapv(|y| 1.0 - y));
                    before[a.0].grad += &da;
                }
            }
            Op::Tanh(a) => {
                if before[a.0].needs_grad {
                    let da = g * &node.value.mapv(|y| 1.0 - y * y);
                    before[a.0].grad += &da;
                }
            }
            Op::Relu(a) => {
                if before[a.0].needs_grad {
                    let da = g * &before[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    before[a.0].grad += &da;
                }
            }
            Op::Transpose(a) => {
                if before[a.0].needs_grad {
                    let da = g.t().to_owned();
                    before[a.0].grad += &da;
                }
            }
            Op::SliceRows(a, start, end) => {
                if before[a.0].needs_grad {
                    let mut target = before[a.0].grad.slice_mut(s![*start..*end, ..]);
                    target += g;
                }
            }
            Op::SliceCols(a, start, end) => {
                if before[a.0].needs_grad {
                    let mut target = before[a.0].grad.slice_mut(s![.., *start..*end]);
                    target += g;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = before[p.0].value.nrows();
                    if before[p.0].needs_grad {
                        let block = g.slice(s![offset..offset + rows, ..]).to_owned();
                        before[p.0].grad += &block;
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = before[p.0].value.ncols();
                    if before[p.0].needs_grad {
                        let block = g.slice(s![.., offset..offset + cols]).to_owned();
                        before[p.0].grad += &block;
                    }
                    offset += cols;
                }
            }
            Op::SoftmaxRows(a) => {
                if before[a.0].needs_grad {
                    // dx = y * (dy - sum_j dy_j y_j), row-wise.
                    let y = &node.value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    before[a.0].grad += &da;
                }
            }
            Op::SumAll(a) => {
                if before[a.0].needs_grad {
                    let da = Array2::from_elem(before[a.0].value.raw_dim(), g[[0, 0]]);
                    before[a.0].grad += &da;
                }
            }
            Op::EmbedRows { table, rows } => {
                if before[table.0].needs_grad {
                    for (i_row, entries) in rows.iter().enumerate() {
                        for &(idx, w) in entries {
                            let mut target = before[table.0].grad.row_mut(idx);
                            target += &(&g.row(i_row) * w);
                        }
                    }
                }
            }
            Op::Im2Col { input, kernel } => {
                if before[input.0].needs_grad {
                    let (t_len, e) = before[input.0].value.dim();
                    let pad = kernel / 2;
                    for t in 0..t_len {
                        for j in 0..*kernel {
                            let src = t as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < t_len {
                                let block = g.slice(s![t, j * e..(j + 1) * e]);
                                let mut target = before[input.0].grad.row_mut(src as usize);
                                target += &block;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = &before[input.0].value;
                let gam = &before[gamma.0].value;
                let (m, d) = x.dim();
                let mut d_input = Array2::zeros((m, d));
                let mut d_gamma = Array2::zeros((1, d));
                let mut d_beta = Array2::zeros((1, d));
                for r in 0..m {
                    let row = x.row(r);
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                    let std = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) / std).collect();
                    let dxhat: Vec<f64> = (0..d).map(|c| g[[r, c]] * gam[[0, c]]).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        d_gamma[[0, c]] += g[[r, c]] * xhat[c];
                        d_beta[[0, c]] += g[[r, c]];
                        d_input[[r, c]] =
                            (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / std;
                    }
                }
                if before[input.0].needs_grad {
                    before[input.0].grad += &d_input;
                }
                if before[gamma.0].needs_grad {
                    before[gamma.0].grad += &d_gamma;
                }
                if before[beta.0].needs_grad {
                    before[beta.0].grad += &d_beta;
                }
            }
            Op::MeanCrossEntropy { logits, targets } => {
                if before[logits.0].needs_grad {
                    let z = &before[logits.0].value;
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut dz = Array2::zeros(z.raw_dim());
                    for &(row, class) in targets {
                        let probs =
                            stable_softmax_row(z.row(row).as_slice().expect("contiguous row"));
                        for (c, p) in probs.into_iter().enumerate() {
                            dz[[row, c]] += scale * p;
                        }
                        dz[[row, class]] -= scale;
                    }
                    before[logits.0].grad += &dz;
                }
            }
        }
    }
}

/// Named parameter tensors, ordered by name for stable iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.map.insert(name.to_string(), value);
    }

    /// Panics on a missing name: parameter layouts are fixed per model family,
    /// so absence is a construction bug, not a runtime condition.
    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Copies every tensor onto a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let map = self
            .map
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), true)))
            .collect();
        BoundParams { map }
    }

    /// Copies every tensor onto a tape as a non-differentiable constant, for
    /// inference passes.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let map = self
            .map
            .iter()
            .map(|(name, value)| (name.clone(), tape.constant(value.clone())))
            .collect();
        BoundParams { map }
    }
}

/// Tape handles for one [`ParamSet::bind`] call.
#[derive(Debug, Clone)]
pub struct BoundParams {
    map: BTreeMap<String, Tid>,
}

impl BoundParams {
    /// Assembles handles produced elsewhere (gradient checking, partial
    /// rebinding).
    pub fn from_pairs<I: IntoIterator<Item = (String, Tid)>>(pairs: I) -> Self {
        BoundParams {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn tid(&self, name: &str) -> Tid {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tid)> {
        self.map.iter()
    }
}

/// Gradient sums across examples, for minibatch accumulation.
#[derive(Debug, Clone, Default)]
pub struct GradAccum {
    sums: BTreeMap<String, Array2<f64>>,
    count: usize,
}

impl GradAccum {
    pub fn new() -> Self {
        GradAccum::default()
    }

    /// Adds one example's parameter gradients (after `tape.backward`).
    pub fn absorb(&mut self, tape: &Tape, bound: &BoundParams) {
        for (name, &tid) in bound.iter() {
            let g = tape.grad(tid);
            match self.sums.get_mut(name) {
                Some(sum) => *sum += g,
                None => {
                    self.sums.insert(name.clone(), g.clone());
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient per parameter. Empty accumulator yields nothing.
    pub fn mean(&self) -> BTreeMap<String, Array2<f64>> {
        self.sums
            .iter()
            .map(|(name, sum)| (name.clone(), sum / self.count as f64))
            .collect()
    }
}

/// Compares analytic gradients against central finite differences.
///
/// Builds the scalar loss once for the analytic pass, then re-evaluates it
/// with each input entry perturbed by ±h. Returns the worst relative error
/// over all entries of all inputs, with the denominator floored at 1e-6 so
/// near-zero gradients compare absolutely. `build` must be deterministic.
pub fn finite_difference_max_rel_err<F>(inputs: &[Array2<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Tid]) -> Tid,
{
    let mut tape = Tape::new();
    let tids: Vec<Tid> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone(), true))
        .collect();
    let loss = build(&mut tape, &tids);
    assert_eq!(tape.value(loss).dim(), (1, 1), "build must return a scalar");
    tape.backward(loss);
    let analytic: Vec<Array2<f64>> = tids.iter().map(|&t| tape.grad(t).clone()).collect();

    let eval = |pert: &[Array2<f64>]| -> f64 {
        let mut tape = Tape::new();
        let tids: Vec<Tid> = pert.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let loss = build(&mut tape, &tids);
        tape.value(loss)[[0, 0]]
    };

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for (idx, _) in x.indexed_iter() {
            let mut plus = inputs.to_vec();
            plus[i][idx] += h;
            let mut minus = inputs.to_vec();
            minus[i][idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic[i][idx];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
