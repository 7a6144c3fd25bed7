//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node to the [`Tape`]; node ids are therefore in
//! topological order by construction. [`Tape::backward`] walks the nodes once,
//! from the loss back to the first leaf, and accumulates vector-Jacobian
//! products into a [`Gradients`] table indexed by [`Var`].
//!
//! Forward ops reject non-finite results, so a NaN surfaces at the op that
//! produced it instead of at the optimizer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, Tensor};

/// Squared-norm floor used by [`Tape::normalize_rows`]; `‖v‖ = sqrt(max(Σv², NORM_FLOOR))`.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    GinAggregate { x: Var, eps: Var, neighbors: Vec<Vec<usize>> },
    SumRows(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
    RowMax { x: Var, argmax: Vec<usize> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Tensor },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-writer record of forward computations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul_nt", out, Op::MatMulNt(a, b), ng)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push("scale", out, Op::Scale(a, s), ng)
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, b: Var, sign: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(b) != (1, c) {
            return Err(shape_err(name, format!("{r}x{c} with row {:?}", self.shape(b))));
        }
        let xb = self.value(x);
        let bb = self.value(b).data();
        let mut out = xb.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &v) in row.iter_mut().zip(bb) {
                *o += sign * v;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        let op = if sign > 0.0 { Op::AddRow(x, b) } else { Op::SubRow(x, b) };
        self.push(name, out, op, ng)
    }

    /// `x + 1·b` where `b` is a `1 x n` row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, 1.0)
    }

    /// `x - 1·b` where `b` is a `1 x n` row.
    pub fn sub_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("sub_row", x, b, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push("relu", out, Op::Relu(x), ng)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        let out = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push("softmax_rows", out, Op::Softmax(x), ng)
    }

    /// Row-wise layer normalization followed by a shared affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(shape_err("layer_norm", format!("{r}x{c} with gain {:?}", self.shape(gain))));
        }
        if eps < 0.0 {
            return Err(Error::Argument(format!("layer_norm eps must be non-negative, got {eps}")));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.data_mut()[i * c + j] = h;
                out.data_mut()[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Embedding lookup: row `i` of the output is row `indices[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if indices.is_empty() {
            return Err(Error::Argument("gather_rows needs at least one index".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(shape_err("gather_rows", format!("index {i} out of {r} rows")));
            }
            data.extend_from_slice(self.value(table).row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        let ng = self.needs(table);
        self.push("gather_rows", out, Op::GatherRows(table, indices.to_vec()), ng)
    }

    /// GIN neighbourhood aggregation `(1+ε)·x_v + Σ_{u∈N(v)} x_u`.
    ///
    /// `neighbors` must be symmetric (undirected graph).
    pub fn gin_aggregate(&mut self, x: Var, eps: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if neighbors.len() != r || self.shape(eps) != (1, 1) {
            return Err(shape_err("gin_aggregate", format!("{r} nodes, {} adjacency rows", neighbors.len())));
        }
        let xv = self.value(x);
        let e = 1.0 + self.value(eps).item();
        let mut out = xv.scale(e);
        for (v, nbrs) in neighbors.iter().enumerate() {
            for &u in nbrs {
                if u >= r {
                    return Err(shape_err("gin_aggregate", format!("neighbor {u} out of {r}")));
                }
                for j in 0..c {
                    out.data_mut()[v * c + j] += xv.data()[u * c + j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(eps);
        self.push("gin_aggregate", out, Op::GinAggregate { x, eps, neighbors: neighbors.to_vec() }, ng)
    }

    /// Column-wise sum over rows, giving a `1 x n` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let out = column_sums(self.value(x));
        let ng = self.needs(x);
        self.push("sum_rows", out, Op::SumRows(x), ng)
    }

    /// Column-wise mean over rows, giving a `1 x n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.shape(x).0 as f64;
        let out = column_sums(self.value(x)).scale(1.0 / m);
        let ng = self.needs(x);
        self.push("mean_rows", out, Op::MeanRows(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_rows needs at least one part".into()));
        };
        let c = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(shape_err("concat_rows", format!("{pc} cols vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_cols needs at least one part".into()));
        };
        let r = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        let ng = self.needs(x);
        self.push("slice_rows", out, Op::SliceRows { x, start }, ng)
    }

    /// Scales each row to unit length using the guarded norm
    /// `sqrt(max(Σv², NORM_FLOOR))`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = guarded_norm(row);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.needs(x);
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms }, ng)
    }

    /// Per-row maximum, optionally skipping one column per row. Ties go to the
    /// first maximal column in ascending order, which also receives the whole
    /// subgradient.
    pub fn row_max_excluding(&mut self, x: Var, excluded: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if excluded.len() != r {
            return Err(shape_err("row_max_excluding", format!("{} exclusions for {r} rows", excluded.len())));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        for (i, ex) in excluded.iter().enumerate() {
            let row = xv.row_slice(i);
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if Some(j) == *ex {
                    continue;
                }
                if best.is_none_or(|b| v > row[b]) {
                    best = Some(j);
                }
            }
            let Some(b) = best else {
                return Err(Error::Argument(format!("row {i} of a {r}x{c} matrix has no candidate for max")));
            };
            out.push(row[b]);
            argmax.push(b);
        }
        let out = Tensor::matrix(r, 1, out)?;
        let ng = self.needs(x);
        self.push("row_max_excluding", out, Op::RowMax { x, argmax }, ng)
    }

    /// `Σ_i −log softmax(logits_i)[labels_i]`, stabilized by max-logit subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != r {
            return Err(shape_err("softmax_cross_entropy", format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err("softmax_cross_entropy", format!("label {bad} out of {c} classes")));
        }
        let lv = self.value(logits);
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row_slice(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            total += lse - row[y];
        }
        let ng = self.needs(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(total),
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
            ng,
        )
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push("sum", out, Op::Sum(x), ng)
    }

    /// Mean of all entries as a `1 x 1` scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::SubRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, column_sums(g).scale(-1.0));
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = Tensor::zeros(y.rows(), c);
                for i in 0..y.rows() {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let s = dot(yr, gr);
                    for j in 0..c {
                        gx.data_mut()[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = (xhat.rows(), xhat.cols());
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, column_sums(&g.zip_map(xhat, |a, b| a * b)));
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, column_sums(g));
                }
                if self.needs(*x) {
                    let gn = self.value(*gain).data();
                    let mut gx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gr = g.row_slice(i);
                        let hr = xhat.row_slice(i);
                        let dh: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dot(&dh, hr) / c as f64;
                        for j in 0..c {
                            gx.data_mut()[i * c + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::GatherRows(table, idx) => {
                let (r, c) = self.shape(*table);
                let mut gt = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gt.data_mut()[i * c + j] += g.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::GinAggregate { x, eps, neighbors } => {
                let xv = self.value(*x);
                if self.needs(*eps) {
                    let s = dot(g.data(), xv.data());
                    self.accumulate(grads, *eps, Tensor::scalar(s));
                }
                if self.needs(*x) {
                    let c = xv.cols();
                    let e = 1.0 + self.value(*eps).item();
                    let mut gx = g.scale(e);
                    for (v, nbrs) in neighbors.iter().enumerate() {
                        // out_v reads x_u, so x_u collects g_v
                        for &u in nbrs {
                            for j in 0..c {
                                gx.data_mut()[u * c + j] += g.data()[v * c + j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                let s = if matches!(node.op, Op::MeanRows(_)) { 1.0 / r as f64 } else { 1.0 };
                let mut gx = Tensor::zeros(r, c);
                for row in gx.data_mut().chunks_mut(c) {
                    for (o, &v) in row.iter_mut().zip(g.data()) {
                        *o = v * s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if self.needs(p) {
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(r, c, data)?);
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + pc]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(r, pc, data)?);
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeRows { x, norms } => {
                let u = &node.value;
                let c = u.cols();
                let mut gx = Tensor::zeros(u.rows(), c);
                for (i, &n) in norms.iter().enumerate() {
                    let ur = u.row_slice(i);
                    let gr = g.row_slice(i);
                    let floored = n * n <= NORM_FLOOR;
                    let proj = if floored { 0.0 } else { dot(ur, gr) };
                    for j in 0..c {
                        gx.data_mut()[i * c + j] = (gr[j] - ur[j] * proj) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowMax { x, argmax } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for (i, &j) in argmax.iter().enumerate() {
                    gx.data_mut()[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let c = probs.cols();
                let s = g.item();
                let mut gx = probs.scale(s);
                for (i, &y) in labels.iter().enumerate() {
                    gx.data_mut()[i * c + y] -= s;
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(r, c, g.item()));
            }
        }
        Ok(())
    }
}

/// `sqrt(max(Σv², NORM_FLOOR))`.
pub fn guarded_norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v).max(NORM_FLOOR))
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn column_sums(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(3, 3, &[0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 1.0, 2.0, 3.0]));
        let y = tape.softmax_rows(x).unwrap();
        let y = tape.value(y);
        for j in 0..3 {
            assert!((y.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
            assert!((y.get(1, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        // e^k / (e + e^2 + e^3), evaluated in extended precision
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (j, e) in expected.iter().enumerate() {
            assert!((y.get(2, j) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(2, 2, &[1.0, 3.0, 4.0, 4.0]));
        let g = tape.constant(Tensor::row(&[1.0, 1.0]));
        let b = tape.constant(Tensor::row(&[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 0.0);
        // constant row with eps = 0 divides by zero
        assert!(matches!(y, Err(Error::NonFinite(_))));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let y = tape.value(y);
        assert!((y.get(0, 0) + 1.0).abs() < 1e-5 && (y.get(0, 1) - 1.0).abs() < 1e-5);
        assert_eq!(y.row_slice(1), &[0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[1.0, 3.0]));
        let g = tape.constant(Tensor::row(&[1.0, 1.0]));
        let b = tape.constant(Tensor::row(&[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let xv = t(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x), xv.scale(2.0));
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut tape = Tape::new();
        let lv = t(2, 3, &[0.3, -1.0, 2.0, 0.0, 0.5, 0.1]);
        let l = tape.param(lv.clone());
        let loss = tape.softmax_cross_entropy(l, &[2, 0]).unwrap();
        let g = tape.backward(loss).unwrap().get(l);
        let mut expected = softmax_rows(&lv);
        expected.data_mut()[2] -= 1.0;
        expected.data_mut()[3] -= 1.0;
        for (a, b) in g.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(t(1, 3, &[1.0, 2.0, 3.0]));
        let loss = tape.scale(a, 3.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).item(), 3.0);
        assert_eq!(grads.get(unused), Tensor::zeros(1, 3));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn row_max_prefers_first_tie_and_skips_excluded() {
        let mut tape = Tape::new();
        let x = tape.param(t(2, 3, &[1.0, 4.0, 4.0, 9.0, 2.0, 2.0]));
        let m = tape.row_max_excluding(x, &[None, Some(0)]).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 2.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_rows_floor_keeps_origin_finite() {
        let mut tape = Tape::new();
        let x = tape.param(t(2, 2, &[0.0, 0.0, 3.0, 4.0]));
        let u = tape.normalize_rows(x).unwrap();
        assert_eq!(tape.value(u).data(), &[0.0, 0.0, 0.6, 0.8]);
        let s = tape.sum(u).unwrap();
        let g = tape.backward(s).unwrap().get(x);
        assert!(g.is_finite());
    }

    #[test]
    fn gin_aggregate_sums_neighbors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(2, 2, &[1.0, 2.0, 10.0, 20.0]));
        let eps = tape.constant(Tensor::scalar(0.0));
        let y = tape.gin_aggregate(x, eps, &[vec![1], vec![0]]).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 11.0, 22.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e300));
        assert!(matches!(tape.scale(x, 1e300), Err(Error::NonFinite("scale"))));
    }
}
