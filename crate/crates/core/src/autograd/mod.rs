//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. Because an operation can only consume values recorded before it,
//! the tape is already a topological order: the backward pass walks it once
//! from the end, visiting each node exactly once. The graph is built per step
//! and dropped after the optimizer update.

mod params;

pub use params::{Param, ParamId, ParamStore};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, dot};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Layout of a batched multi-head attention call.
///
/// Queries are `[batch * q_len, d]`, keys and values `[batch * k_len, d]`.
/// Key position `j` of batch entry `b` is visible iff `j < key_lens[b]` and,
/// when `causal`, `j <= i` for query position `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_lens: Vec<usize>,
}

impl AttnSpec {
    fn visible(&self, b: usize, i: usize) -> usize {
        let lim = self.key_lens[b].min(self.k_len);
        if self.causal {
            lim.min(i + 1)
        } else {
            lim
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        tau: f64,
        log: bool,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Select {
        x: Var,
        index: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
    LayerMix {
        weights: Var,
        layers: Vec<Var>,
    },
    Reshape(Var),
    Sum(Var),
    Nll {
        scores: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        count: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { log: false, .. } => "softmax",
            Op::Softmax { log: true, .. } => "log_softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::Select { .. } => "select",
            Op::Attention { .. } => "attention",
            Op::LayerMix { .. } => "layer_mix",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Nll { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!(
            "{what} expects a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

impl Graph {
    /// A graph that records gradients for parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph for evaluation only: no value on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape. Repeated calls for the same
    /// id return the same handle, so tied uses share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Name of the first recorded operation whose output is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.op.name())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix(self.value(a), "matmul")?;
        let (k2, n) = require_matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`; used for output projections against an embedding table.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix(self.value(a), "matmul_nt")?;
        let (n, k2) = require_matrix(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let width = self.value(a).last_dim();
        if self.value(bias).numel() != width {
            return Err(Error::shape(format!(
                "bias of {} elements for rows of width {width}",
                self.value(bias).numel()
            )));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-feature affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let width = self.value(x).last_dim();
        if width == 0 || self.value(x).rank() == 0 {
            return Err(Error::shape("layer_norm over a zero-length axis"));
        }
        if self.value(gain).numel() != width || self.value(bias).numel() != width {
            return Err(Error::shape(format!(
                "layer_norm gain/bias length must be {width}"
            )));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let mut out = vec![0.0; xv.numel()];
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for d in 0..width {
                let h = (row[d] - mean) * is;
                xhat[r * width + d] = h;
                out[r * width + d] = h * g[d] + bb[d];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, tau: f64, log: bool) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::param(format!("temperature must be positive, got {tau}")));
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if len == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let src = self.value(x).data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                op: if log { "log_softmax" } else { "softmax" }.into(),
                step: None,
            });
        }
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for l in 0..len {
                    buf[l] = src[base + l * inner];
                }
                if log {
                    let lse = kernels::log_sum_exp(&buf, tau);
                    for l in 0..len {
                        out[base + l * inner] = buf[l] / tau - lse;
                    }
                } else {
                    kernels::softmax_in_place(&mut buf, tau);
                    for l in 0..len {
                        out[base + l * inner] = buf[l];
                    }
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                tau,
                log,
            },
            &[x],
        ))
    }

    /// `exp(x/tau) / sum(exp(x'/tau))` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, tau: f64) -> Result<Var> {
        self.softmax_impl(x, axis, tau, false)
    }

    /// Log of [`Graph::softmax`], computed without forming the probabilities.
    pub fn log_softmax(&mut self, x: Var, axis: usize, tau: f64) -> Result<Var> {
        self.softmax_impl(x, axis, tau, true)
    }

    /// Rows of a matrix (or embedding table) in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(rows)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Slice `index` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&lead, rest)) = shape.split_first() else {
            return Err(Error::shape("select on a scalar"));
        };
        if index >= lead {
            return Err(Error::Index(format!("select {index} of {lead}")));
        }
        let width: usize = rest.iter().product();
        let data = self.value(x).data()[index * width..(index + 1) * width].to_vec();
        let value = Tensor::new(rest, data)?;
        Ok(self.push(value, Op::Select { x, index }, &[x]))
    }

    /// Scaled dot-product attention over `spec.heads` heads; rows of the
    /// attention matrix are softmaxes over the visible keys only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qr, d) = require_matrix(self.value(q), "attention query")?;
        let (kr, dk) = require_matrix(self.value(k), "attention key")?;
        let (vr, dv) = require_matrix(self.value(v), "attention value")?;
        if dk != d || dv != d || kr != vr {
            return Err(Error::shape("attention q/k/v widths or key/value rows differ"));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::param(format!(
                "{} heads do not divide width {d}",
                spec.heads
            )));
        }
        if qr != spec.batch * spec.q_len || kr != spec.batch * spec.k_len {
            return Err(Error::shape(format!(
                "attention rows q={qr} k={kr} for batch {} x ({}, {})",
                spec.batch, spec.q_len, spec.k_len
            )));
        }
        if spec.key_lens.len() != spec.batch {
            return Err(Error::shape("one key length per batch entry required"));
        }
        if spec.key_lens.contains(&0) {
            return Err(Error::Empty("attention row with every key masked".into()));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (tq, tk, h_count) = (spec.q_len, spec.k_len, spec.heads);
        let mut probs = vec![0.0; spec.batch * h_count * tq * tk];
        let mut out = vec![0.0; qr * d];
        for b in 0..spec.batch {
            for h in 0..h_count {
                let off = h * dh;
                for i in 0..tq {
                    let visible = spec.visible(b, i);
                    let qrow = &qv[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    let p = &mut probs[((b * h_count + h) * tq + i) * tk..][..tk];
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        let krow = &kv[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        *pj = dot(qrow, krow) * scale;
                    }
                    kernels::softmax_in_place(&mut p[..visible], 1.0);
                    let orow = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    for (j, &pj) in p.iter().enumerate().take(visible) {
                        let vrow = &vv[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[qr, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, spec, probs }, &[q, k, v]))
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, laid out
    /// as `[batch, heads, q_len, k_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `sum_l weights[l] (.) layers[l]`, with `weights` of shape
    /// `[layers, width]` broadcast over the rows of every layer.
    pub fn layer_mix(&mut self, weights: Var, layers: &[Var]) -> Result<Var> {
        let (l, width) = require_matrix(self.value(weights), "layer_mix weights")?;
        if l != layers.len() || l == 0 {
            return Err(Error::shape(format!(
                "{l} weight rows for {} layers",
                layers.len()
            )));
        }
        let shape = self.shape(layers[0]).to_vec();
        for &x in layers {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::shape("layer_mix inputs differ in shape"));
            }
        }
        if shape.last().copied() != Some(width) {
            return Err(Error::shape("layer_mix weight width does not match layers"));
        }
        let mut out = vec![0.0; shape.iter().product()];
        let w = self.value(weights).data();
        for (li, &x) in layers.iter().enumerate() {
            let wl = &w[li * width..(li + 1) * width];
            for (orow, xrow) in out
                .chunks_mut(width)
                .zip(self.nodes[x.0].value.data().chunks(width))
            {
                for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wl) {
                    *o += wv * xv;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![weights];
        inputs.extend_from_slice(layers);
        Ok(self.push(
            value,
            Op::LayerMix {
                weights,
                layers: layers.to_vec(),
            },
            &inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean negative log-score of the targets over non-padding rows, with
    /// optional label smoothing `eps`: each row contributes
    /// `(1 - eps) * -s[target] + eps * mean_v(-s[v])`. Rows whose target
    /// equals `pad` contribute nothing. With no scored rows the loss is 0.
    pub fn cross_entropy(
        &mut self,
        scores: Var,
        targets: &[usize],
        pad: Option<usize>,
        smoothing: f64,
    ) -> Result<Var> {
        let (rows, vocab) = require_matrix(self.value(scores), "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "{} targets for {rows} score rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::param(format!("label smoothing {smoothing}")));
        }
        let mut kept = Vec::with_capacity(rows);
        for &t in targets {
            if Some(t) == pad {
                kept.push(None);
            } else if t >= vocab {
                return Err(Error::Index(format!("target {t} outside vocabulary of {vocab}")));
            } else {
                kept.push(Some(t));
            }
        }
        let count = kept.iter().flatten().count();
        let s = self.value(scores);
        let mut total = 0.0;
        for (r, t) in kept.iter().enumerate() {
            if let Some(t) = *t {
                let row = s.row(r);
                let mut term = -(1.0 - smoothing) * row[t];
                if smoothing > 0.0 {
                    term -= smoothing * row.iter().sum::<f64>() / vocab as f64;
                }
                total += term;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                scores,
                targets: kept,
                smoothing,
                count,
            },
            &[scores],
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape("backward requires a scalar output"));
        }
        if let Some(op) = self.first_non_finite() {
            return Err(Error::NonFinite {
                op: op.into(),
                step: None,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = require_matrix(self.value(*a), "matmul")?;
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.accum(grads, *a) {
                    kernels::matmul_nt(gd, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    kernels::matmul_tn(self.value(*a).data(), gd, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = require_matrix(self.value(*a), "matmul_nt")?;
                let n = self.value(*b).shape()[0];
                if let Some(ga) = self.accum(grads, *a) {
                    kernels::matmul_nn(gd, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    kernels::matmul_tn(gd, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.accum(grads, v) {
                        gv.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.accum(grads, *a) {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
                let width = g.last_dim();
                if let Some(gb) = self.accum(grads, *bias) {
                    for row in gd.chunks(width) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accum(grads, *a) {
                    for ((x, y), z) in ga.iter_mut().zip(gd).zip(bv) {
                        *x += y * z;
                    }
                }
                if let Some(gb) = self.accum(grads, *b) {
                    for ((x, y), z) in gb.iter_mut().zip(gd).zip(av) {
                        *x += y * z;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.accum(grads, *a) {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y * f);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.accum(grads, *a) {
                    for ((x, y), z) in ga.iter_mut().zip(gd).zip(av) {
                        if *z > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let width = g.last_dim();
                let gv = self.value(*gain).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &gd[r * width..(r + 1) * width];
                        let hr = &xhat[r * width..(r + 1) * width];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for d in 0..width {
                            let dh = gr[d] * gv[d];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[d];
                        }
                        mean_dh /= width as f64;
                        mean_dh_h /= width as f64;
                        let out = &mut gx[r * width..(r + 1) * width];
                        for d in 0..width {
                            let dh = gr[d] * gv[d];
                            out[d] += is * (dh - mean_dh - hr[d] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.accum(grads, *gain) {
                    for (grow, hrow) in gd.chunks(width).zip(xhat.chunks(width)) {
                        for d in 0..width {
                            gg[d] += grow[d] * hrow[d];
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *bias) {
                    for grow in gd.chunks(width) {
                        gb.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                tau,
                log,
            } => {
                let y = node.value.data();
                let (outer, len, inner, tau, log) = (*outer, *len, *inner, *tau, *log);
                if let Some(gx) = self.accum(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let at = |l: usize| base + l * inner;
                            if log {
                                let total: f64 = (0..len).map(|l| gd[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += (gd[at(l)] - y[at(l)].exp() * total) / tau;
                                }
                            } else {
                                let inner_prod: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += y[at(l)] * (gd[at(l)] - inner_prod) / tau;
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let width = g.last_dim();
                if let Some(gx) = self.accum(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &gd[i * width..(i + 1) * width];
                        gx[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Select { x, index } => {
                let width = g.numel();
                if let Some(gx) = self.accum(grads, *x) {
                    gx[index * width..(index + 1) * width]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.backprop_attention(*q, *k, *v, spec, probs, gd, grads),
            Op::LayerMix { weights, layers } => {
                let width = g.last_dim();
                let w = self.value(*weights).data();
                for (li, &x) in layers.iter().enumerate() {
                    let wl = &w[li * width..(li + 1) * width];
                    if let Some(gx) = self.accum(grads, x) {
                        for (grow, orow) in gx.chunks_mut(width).zip(gd.chunks(width)) {
                            for d in 0..width {
                                grow[d] += wl[d] * orow[d];
                            }
                        }
                    }
                }
                if self.nodes[weights.0].needs_grad {
                    let mut gw = vec![0.0; w.len()];
                    for (li, &x) in layers.iter().enumerate() {
                        let xv = self.value(x).data();
                        let gwl = &mut gw[li * width..(li + 1) * width];
                        for (xrow, orow) in xv.chunks(width).zip(gd.chunks(width)) {
                            for d in 0..width {
                                gwl[d] += xrow[d] * orow[d];
                            }
                        }
                    }
                    if let Some(dst) = self.accum(grads, *weights) {
                        dst.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                if let Some(gx) = self.accum(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Nll {
                scores,
                targets,
                smoothing,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let vocab = self.value(*scores).last_dim();
                let scale = gd[0] / *count as f64;
                if let Some(gs) = self.accum(grads, *scores) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gs[r * vocab..(r + 1) * vocab];
                        row[t] -= (1.0 - smoothing) * scale;
                        if *smoothing > 0.0 {
                            let u = smoothing * scale / vocab as f64;
                            row.iter_mut().for_each(|a| *a -= u);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let d = self.value(q).last_dim();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, hc) = (spec.q_len, spec.k_len, spec.heads);
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..spec.batch {
            for h in 0..hc {
                let off = h * dh;
                for i in 0..tq {
                    let visible = spec.visible(b, i);
                    let p = &probs[((b * hc + h) * tq + i) * tk..][..tk];
                    let qi = (b * tq + i) * d + off;
                    let grow = &gd[qi..qi + dh];
                    let mut inner = 0.0;
                    for j in 0..visible {
                        let vj = (b * tk + j) * d + off;
                        dp[j] = dot(grow, &vv[vj..vj + dh]);
                        inner += dp[j] * p[j];
                        for (a, &x) in dv[vj..vj + dh].iter_mut().zip(grow) {
                            *a += p[j] * x;
                        }
                    }
                    for j in 0..visible {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (b * tk + j) * d + off;
                        for c in 0..dh {
                            dq[qi + c] += ds * kv[kj + c];
                            dk[kj + c] += ds * qv[qi + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dst) = self.accum(grads, var) {
                dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter on `graph` into `store`.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        let mut entries: Vec<(ParamId, Var)> = graph.params.iter().map(|(&p, &v)| (p, v)).collect();
        entries.sort();
        for (id, v) in entries {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests;
