//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! Every operation appends a node holding its output value, so the record
//! is topologically ordered by construction. [`Tape::backward`] walks it in
//! reverse and accumulates adjoints into the leaves.
//!
//! The operation set is closed: matmul, add, bias-add, scale, relu, sigmoid,
//! masked row softmax, layer norm, embedding lookup, concat, slice,
//! transpose, sum, cross-entropy and L1.

use std::collections::BTreeMap;

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use super::{AutodiffError, ParamId, ParamStore};

/// Epsilon inside the layer-norm variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Public name of each recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Scale,
    Relu,
    Sigmoid,
    MaskedSoftmax,
    LayerNorm,
    Embedding,
    Concat,
    Slice,
    Transpose,
    Sum,
    CrossEntropy,
    L1,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    MaskedSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: Axis,
    },
    Slice {
        input: NodeId,
        axis: Axis,
        start: usize,
    },
    Transpose(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L1 {
        pred: NodeId,
        target: NodeId,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::MaskedSoftmax(..) => OpKind::MaskedSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::L1 { .. } => OpKind::L1,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`, if it was reached.
    pub fn of(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter bound on the tape. Parameters with no
    /// path to the loss get exact zeros.
    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
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

    /// Current record length; pass to [`Tape::rewind`] to drop later nodes.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.inputs_of(&self.nodes[id.0].op)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = self
            .inputs_of(&op)
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::MaskedSoftmax(a)
            | Op::Transpose(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::L1 { pred, target } => vec![*pred, *target],
        }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf that is not a registered parameter.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true, None)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false, None)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        self.leaf(value, true, Some(id))
    }

    /// Records every parameter of `store` as a leaf; the result is indexed
    /// by [`ParamId`].
    pub fn bind(&mut self, store: &ParamStore) -> Vec<NodeId> {
        store
            .iter()
            .map(|(id, _, t)| self.param(id, t.clone()))
            .collect()
    }

    fn mat_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), AutodiffError> {
        let v = &self.nodes[id.0].value;
        if !v.is_matrix() {
            return Err(shape_err(
                op,
                format!("expected a matrix, got shape {:?}", v.shape()),
            ));
        }
        Ok((v.shape()[0], v.shape()[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, k) = self.mat_dims("matmul", a)?;
        let (k2, m) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{n}×{k} · {k2}×{m}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::matrix(n, m, out)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        self.push(Op::Add(a, b), value, "add")
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.numel() != va.cols() || vb.shape().len() != 1 {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + bias {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut value = va.clone();
        let c = va.cols();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += vb.data()[i % c];
        }
        self.push(Op::AddBias(a, bias), value, "add_bias")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= factor);
        self.push(Op::Scale(a, factor), value, "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(Op::Relu(a), value, "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        self.push(Op::Sigmoid(a), value, "sigmoid")
    }

    /// Row-wise softmax over the positions where `mask` is true (row-major,
    /// same extent as `a`). Masked positions get exactly zero weight.
    /// `None` keeps every position.
    pub fn masked_softmax(
        &mut self,
        a: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.mat_dims("masked_softmax", a)?;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(shape_err(
                    "masked_softmax",
                    format!("mask of {} entries for {rows}×{cols} scores", m.len()),
                ));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let row = &src[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::DegenerateAttention { row: r });
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    dst[c] = (row[c] - max).exp();
                    total += dst[c];
                }
            }
            dst.iter_mut().for_each(|x| *x /= total);
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push(Op::MaskedSoftmax(a), value, "masked_softmax")
    }

    /// Normalizes each row to zero mean / unit variance, then applies the
    /// per-column affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.mat_dims("layer_norm", x)?;
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s != [cols] {
                return Err(shape_err(
                    "layer_norm",
                    format!("affine {s:?} for width {cols}"),
                ));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            "layer_norm",
        )
    }

    /// Gathers rows of `table` (vocab × width).
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let (vocab, width) = self.mat_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(shape_err("embedding", "no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err(
                "embedding",
                format!("id {bad} out of range for {vocab} rows"),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(ids.len(), width, out)?;
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
            "embedding",
        )
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: Axis) -> Result<NodeId, AutodiffError> {
        if inputs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let dims: Vec<(usize, usize)> = inputs
            .iter()
            .map(|&i| self.mat_dims("concat", i))
            .collect::<Result<_, _>>()?;
        let value = match axis {
            Axis::Rows => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(shape_err("concat", format!("row concat of {dims:?}")));
                }
                let mut out = Vec::new();
                for &i in inputs {
                    out.extend_from_slice(self.value(i).data());
                }
                Tensor::matrix(out.len() / cols, cols, out)?
            }
            Axis::Cols => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(shape_err("concat", format!("column concat of {dims:?}")));
                }
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &i in inputs {
                        out.extend_from_slice(self.value(i).row(r));
                    }
                }
                Tensor::matrix(rows, total, out)?
            }
        };
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            "concat",
        )
    }

    /// Contiguous `len` rows or columns starting at `start`.
    pub fn slice(
        &mut self,
        input: NodeId,
        axis: Axis,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.mat_dims("slice", input)?;
        let extent = if axis == Axis::Rows { rows } else { cols };
        if len == 0 || start + len > extent {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) of {axis:?} extent {extent}", start + len),
            ));
        }
        let src = self.value(input);
        let value = match axis {
            Axis::Rows => Tensor::matrix(
                len,
                cols,
                src.data()[start * cols..(start + len) * cols].to_vec(),
            )?,
            Axis::Cols => {
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&src.row(r)[start..start + len]);
                }
                Tensor::matrix(rows, len, out)?
            }
        };
        self.push(Op::Slice { input, axis, start }, value, "slice")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.mat_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::matrix(cols, rows, out)?;
        self.push(Op::Transpose(a), value, "transpose")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let total = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(total), "sum")
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let (rows, vocab) = self.mat_dims("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(shape_err(
                "cross_entropy",
                format!("target {bad} ≥ {vocab} classes"),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - log_z).exp();
            }
            loss += log_z - row[targets[r]];
        }
        let value = Tensor::scalar(loss / rows as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
            "cross_entropy",
        )
    }

    /// Mean absolute difference over all entries.
    pub fn l1(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AutodiffError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err(
                "l1",
                format!("{:?} vs {:?}", p.shape(), t.shape()),
            ));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let value = Tensor::scalar(total / p.numel() as f64);
        self.push(Op::L1 { pred, target }, value, "l1")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                let g = grads
                    .get(i)
                    .and_then(Option::clone)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                params
                    .entry(pid)
                    .and_modify(|acc: &mut Tensor| acc.add_assign(&g))
                    .or_insert(g);
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut accumulate = |id: NodeId, delta: Tensor| match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let shaped = |like: NodeId, data: Vec<f64>| {
            Tensor::new(self.nodes[like.0].value.shape().to_vec(), data).expect("gradient shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if needs(*a) {
                    accumulate(*a, shaped(*a, matmul_nt_raw(g.data(), vb.data(), n, m, k)));
                }
                if needs(*b) {
                    accumulate(*b, shaped(*b, matmul_tn_raw(va.data(), g.data(), n, k, m)));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(*a, g.clone());
                }
                if needs(*b) {
                    accumulate(*b, g.clone());
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    accumulate(*a, g.clone());
                }
                if needs(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % c] += v;
                    }
                    accumulate(*b, shaped(*b, db));
                }
            }
            Op::Scale(a, f) => {
                if needs(*a) {
                    accumulate(*a, shaped(*a, g.data().iter().map(|v| v * f).collect()));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = self.value(*a).data();
                    let d = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(*a, shaped(*a, d));
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let d = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(*a, shaped(*a, d));
                }
            }
            Op::MaskedSoftmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..node.value.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g.data()[span.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in d[span].iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    accumulate(*a, shaped(*a, d));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let gd = g.data();
                if needs(*gamma) {
                    let mut dg = vec![0.0; cols];
                    for (i, v) in gd.iter().enumerate() {
                        dg[i % cols] += v * xhat[i];
                    }
                    accumulate(*gamma, shaped(*gamma, dg));
                }
                if needs(*beta) {
                    let mut db = vec![0.0; cols];
                    for (i, v) in gd.iter().enumerate() {
                        db[i % cols] += v;
                    }
                    accumulate(*beta, shaped(*beta, db));
                }
                if needs(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; rows * cols];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let base = r * cols;
                        let gh: Vec<f64> = (0..cols).map(|c| gd[base + c] * gam[c]).collect();
                        let mean_g = gh.iter().sum::<f64>() / cols as f64;
                        let mean_gx =
                            (0..cols).map(|c| gh[c] * xhat[base + c]).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[base + c] = inv * (gh[c] - mean_g - xhat[base + c] * mean_gx);
                        }
                    }
                    accumulate(*x, shaped(*x, dx));
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let t = self.value(*table);
                    let width = t.cols();
                    let mut d = vec![0.0; t.numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..width {
                            d[i * width + c] += g.data()[r * width + c];
                        }
                    }
                    accumulate(*table, shaped(*table, d));
                }
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &i in inputs {
                    let v = self.value(i);
                    let (r, c) = (v.shape()[0], v.shape()[1]);
                    if needs(i) {
                        let part = match axis {
                            Axis::Rows => g.data()[offset * c..(offset + r) * c].to_vec(),
                            Axis::Cols => {
                                let mut out = Vec::with_capacity(r * c);
                                for row in 0..r {
                                    out.extend_from_slice(&g.row(row)[offset..offset + c]);
                                }
                                out
                            }
                        };
                        accumulate(i, shaped(i, part));
                    }
                    offset += if *axis == Axis::Rows { r } else { c };
                }
            }
            Op::Slice { input, axis, start } => {
                if needs(*input) {
                    let v = self.value(*input);
                    let cols = v.cols();
                    let mut d = vec![0.0; v.numel()];
                    match axis {
                        Axis::Rows => {
                            d[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                        }
                        Axis::Cols => {
                            let len = g.cols();
                            for r in 0..g.rows() {
                                d[r * cols + start..r * cols + start + len]
                                    .copy_from_slice(g.row(r));
                            }
                        }
                    }
                    accumulate(*input, shaped(*input, d));
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (rows, cols) = (g.shape()[0], g.shape()[1]);
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c * rows + r] = g.data()[r * cols + c];
                        }
                    }
                    accumulate(*a, shaped(*a, d));
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = self.value(*a).numel();
                    accumulate(*a, shaped(*a, vec![g.item(); n]));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let rows = targets.len();
                    let vocab = probs.len() / rows;
                    let scale = g.item() / rows as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * vocab + t] -= scale;
                    }
                    accumulate(*logits, shaped(*logits, d));
                }
            }
            Op::L1 { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = g.item() / p.len() as f64;
                let sign: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if needs(*target) {
                    accumulate(*target, shaped(*target, sign.iter().map(|v| -v).collect()));
                }
                if needs(*pred) {
                    accumulate(*pred, shaped(*pred, sign));
                }
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
