//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation in append order. Inputs always precede
//! the node that consumes them, so [`Graph::backward`] is a single walk over the
//! tape in reverse. Parameters can be bound by reference, which lets inference
//! and training share one parameter store without copying embedding tables.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Scores are clamped to this magnitude before the log-sigmoid is taken.
pub const LOG_SIGMOID_CLAMP: f64 = 30.0;

/// Variance epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    MaskedSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(NodeId, Vec<f64>),
    Gather(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    RowDot(NodeId, NodeId),
    Sum(NodeId),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    backward_done: bool,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Trainable leaf borrowing its storage.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Trainable leaf owning its storage.
    pub fn param_owned(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Non-trainable leaf borrowing its storage.
    pub fn input(&mut self, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (p, q) = self.value(a).require_matrix("matmul")?;
        let (q2, r) = self.value(b).require_matrix("matmul")?;
        if q != q2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} × {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; p * r];
        tensor::matmul_into(self.value(a).data(), self.value(b).data(), &mut out, p, q, r);
        Ok(self.push_op(Tensor::from_parts_unchecked(vec![p, r], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (p, q) = self.value(a).require_matrix("transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = src[i * q + j];
            }
        }
        Ok(self.push_op(Tensor::from_parts_unchecked(vec![q, p], out), Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                "add",
                format!("shapes differ: {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        Ok(self.push_op(Tensor::from_parts_unchecked(shape, data), Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`q` vector to every row of a `p×q` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (p, q) = self.value(a).require_matrix("add_row")?;
        if self.value(bias).numel() != q {
            return Err(Error::dim(
                "add_row",
                format!(
                    "bias {:?} does not match row width of {:?}",
                    self.value(bias).shape(),
                    self.value(a).shape()
                ),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..p {
            for (v, bv) in data[i * q..(i + 1) * q].iter_mut().zip(b) {
                *v += bv;
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push_op(Tensor::from_parts_unchecked(shape, data), Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let shape = v.shape().to_vec();
        self.push_op(Tensor::from_parts_unchecked(shape, data), Op::Scale(a, c), &[a])
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.push_op(Tensor::from_parts_unchecked(shape, data), op, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln σ(x)` with `x` clamped to `±LOG_SIGMOID_CLAMP`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::LogSigmoid(a), log_sigmoid)
    }

    /// Row-wise softmax of a square matrix where row `i` only sees columns
    /// `0..=i`. Forbidden entries are exactly zero.
    pub fn masked_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (t, t2) = self.value(a).require_matrix("masked_softmax")?;
        if t != t2 {
            return Err(Error::dim(
                "masked_softmax",
                format!("scores must be square, got {:?}", self.value(a).shape()),
            ));
        }
        let out = causal_softmax(self.value(a).data(), t);
        Ok(self.push_op(Tensor::from_parts_unchecked(vec![t, t], out), Op::MaskedSoftmax(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (p, d) = self.value(x).require_matrix("layer_norm")?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match feature width {d}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; p * d];
        let mut inv_std = vec![0.0; p];
        let mut out = vec![0.0; p * d];
        for i in 0..p {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                normalized[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_op(
            Tensor::from_parts_unchecked(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Multiplies by a frozen mask. Inverted-dropout masks hold `0` or
    /// `1/(1-rate)`.
    pub fn dropout_apply(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::dim(
                "dropout",
                format!("mask of {} entries for {:?}", mask.len(), v.shape()),
            ));
        }
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape().to_vec();
        Ok(self.push_op(Tensor::from_parts_unchecked(shape, data), Op::Dropout(x, mask), &[x]))
    }

    /// Selects rows of `src` (repeats allowed).
    pub fn gather(&mut self, src: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (p, q) = self.value(src).require_matrix("gather")?;
        if rows.is_empty() {
            return Err(Error::dim("gather", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= p) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {p} rows"
            )));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(rows.len() * q);
        for &r in &rows {
            out.extend_from_slice(&s[r * q..(r + 1) * q]);
        }
        let n = rows.len();
        Ok(self.push_op(Tensor::from_parts_unchecked(vec![n, q], out), Op::Gather(src, rows), &[src]))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (pa, qa) = self.value(a).require_matrix("concat")?;
        let (pb, qb) = self.value(b).require_matrix("concat")?;
        if pa != pb {
            return Err(Error::dim(
                "concat",
                format!(
                    "row counts differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(pa * (qa + qb));
        for i in 0..pa {
            out.extend_from_slice(&da[i * qa..(i + 1) * qa]);
            out.extend_from_slice(&db[i * qb..(i + 1) * qb]);
        }
        Ok(self.push_op(
            Tensor::from_parts_unchecked(vec![pa, qa + qb], out),
            Op::ConcatCols(a, b),
            &[a, b],
        ))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "nothing to concatenate"))?;
        let q = self.value(first).require_matrix("concat_rows")?.1;
        let mut out = Vec::new();
        let mut p = 0;
        for &id in &parts {
            let (pi, qi) = self.value(id).require_matrix("concat_rows")?;
            if qi != q {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts differ: {q} vs {qi}"),
                ));
            }
            out.extend_from_slice(self.value(id).data());
            p += pi;
        }
        let inputs = parts.clone();
        Ok(self.push_op(Tensor::from_parts_unchecked(vec![p, q], out), Op::ConcatRows(parts), &inputs))
    }

    /// Per-row dot product of two equally shaped matrices, giving `p×1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                "row_dot",
                format!("shapes differ: {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (p, q) = va.require_matrix("row_dot")?;
        let out = (0..p)
            .map(|i| tensor::dot(&va.data()[i * q..(i + 1) * q], &vb.data()[i * q..(i + 1) * q]))
            .collect();
        Ok(self.push_op(Tensor::from_parts_unchecked(vec![p, 1], out), Op::RowDot(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let data = self.value(a).data().to_vec();
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::Reshape(a), &[a]))
    }

    /// Clears the backward flag so the tape may be differentiated again.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; call reset() first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0)?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let g = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = dims(self.value(*a));
                let r = dims(self.value(*b)).1;
                if let Some(ga) = self.grad_buf(grads, *a) {
                    tensor::matmul_nt_acc(g, self.value(*b).data(), ga, p, r, q);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    tensor::matmul_tn_acc(self.value(*a).data(), g, gb, p, q, r);
                }
            }
            Op::Transpose(a) => {
                let (p, q) = dims(self.value(*a));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..p {
                        for j in 0..q {
                            ga[i * q + j] += g[j * p + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(gi) = self.grad_buf(grads, id) {
                        axpy(gi, g, 1.0);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                let q = out.cols();
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for row in g.chunks_exact(q) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(ga, g, *c);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((gi, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *gi += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((gi, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        *gi += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((gi, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv.abs() < LOG_SIGMOID_CLAMP {
                            *gi += gv * sigmoid(-xv);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                let t = out.cols();
                let y = out.data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..t {
                        let yr = &y[i * t..i * t + i + 1];
                        let gr = &g[i * t..i * t + i + 1];
                        let inner = tensor::dot(yr, gr);
                        for j in 0..=i {
                            ga[i * t + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = out.cols();
                let gn = self.value(*gain).data();
                if let Some(gg) = self.grad_buf(grads, *gain) {
                    for (grow, hrow) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for grow in g.chunks_exact(d) {
                        axpy(gb, grow, 1.0);
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (i, (grow, hrow)) in g.chunks_exact(d).zip(normalized.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gn[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h = tensor::dot(&dh, hrow);
                        let scale = inv_std[i] / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += scale * (d as f64 * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((gi, gv), m) in ga.iter_mut().zip(g).zip(mask) {
                        *gi += gv * m;
                    }
                }
            }
            Op::Gather(src, rows) => {
                let q = out.cols();
                if let Some(gs) = self.grad_buf(grads, *src) {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut gs[r * q..(r + 1) * q], &g[k * q..(k + 1) * q], 1.0);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, qa) = dims(self.value(*a));
                let qb = dims(self.value(*b)).1;
                let q = qa + qb;
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..p {
                        axpy(&mut ga[i * qa..(i + 1) * qa], &g[i * q..i * q + qa], 1.0);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..p {
                        axpy(&mut gb[i * qb..(i + 1) * qb], &g[i * q + qa..(i + 1) * q], 1.0);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &id in parts {
                    let n = self.value(id).numel();
                    if let Some(gi) = self.grad_buf(grads, id) {
                        axpy(gi, &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::RowDot(a, b) => {
                let (p, q) = dims(self.value(*a));
                for (this, other) in [(*a, *b), (*b, *a)] {
                    let ov = self.value(other).data();
                    if let Some(gt) = self.grad_buf(grads, this) {
                        for i in 0..p {
                            axpy(&mut gt[i * q..(i + 1) * q], &ov[i * q..(i + 1) * q], g[i]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(ga, g, 1.0);
                }
            }
        }
    }

    /// Mutable gradient buffer for `id`, allocated on first use; `None` when the
    /// node does not need a gradient.
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut [f64]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let shape = self.value(id).shape();
        let slot = grads[id.0].get_or_insert_with(|| {
            Tensor::from_parts_unchecked(shape.to_vec(), vec![0.0; shape.iter().product()])
        });
        Some(slot.data_mut())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
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

/// `ln σ(x) = min(x, 0) − ln(1 + e^{−|x|})`, after clamping `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    let x = x.clamp(-LOG_SIGMOID_CLAMP, LOG_SIGMOID_CLAMP);
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Causal softmax over a `t×t` row-major score buffer.
pub fn causal_softmax(scores: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        let row = &scores[i * t..i * t + i + 1];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, s) in row.iter().enumerate() {
            let e = (s - max).exp();
            out[i * t + j] = e;
            total += e;
        }
        for v in &mut out[i * t..i * t + i + 1] {
            *v /= total;
        }
    }
    out
}
