//! Single-use reverse-mode tape.
//!
//! A [`Graph`] records every operation as a node holding its output value and
//! whatever the backward pass needs. Nodes are appended in execution order,
//! so the node list is already topologically sorted and [`Graph::backward`]
//! walks it in reverse. A graph can be differentiated once.

use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Multiply-accumulate categories used by the complexity accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacKind {
    Base,
    Align,
    Gating,
    Aggregation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacBreakdown {
    pub base: u64,
    pub align: u64,
    pub gating: u64,
    pub aggregation: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.base + self.align + self.gating + self.aggregation
    }

    pub fn add(&mut self, kind: MacKind, n: u64) {
        match kind {
            MacKind::Base => self.base += n,
            MacKind::Align => self.align += n,
            MacKind::Gating => self.gating += n,
            MacKind::Aggregation => self.aggregation += n,
        }
    }

    pub fn accumulate(&mut self, other: &MacBreakdown) {
        self.base += other.base;
        self.align += other.align;
        self.gating += other.gating;
        self.aggregation += other.aggregation;
    }
}

/// Instrumented MAC counter, keyed by a caller-chosen layer index.
#[derive(Debug, Clone, Default)]
pub struct MacTally {
    scope: Option<(usize, MacKind)>,
    rows: Vec<MacBreakdown>,
    unscoped: MacBreakdown,
}

impl MacTally {
    fn record(&mut self, default: MacKind, n: u64) {
        match self.scope {
            Some((layer, kind)) => {
                if self.rows.len() <= layer {
                    self.rows.resize(layer + 1, MacBreakdown::default());
                }
                self.rows[layer].add(kind, n);
            }
            None => self.unscoped.add(default, n),
        }
    }

    pub fn layer(&self, layer: usize) -> MacBreakdown {
        self.rows.get(layer).copied().unwrap_or_default()
    }

    /// MACs recorded while no scope was set.
    pub fn unscoped(&self) -> MacBreakdown {
        self.unscoped
    }

    pub fn rows(&self) -> &[MacBreakdown] {
        &self.rows
    }

    pub fn total(&self) -> MacBreakdown {
        let mut t = self.unscoped;
        for r in &self.rows {
            t.accumulate(r);
        }
        t
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { geom: ConvGeom, per_sample: bool, bias: bool },
    MatMulLead { p: usize, q: usize, r: usize },
    Mix,
    GlobalAvgPool,
    Reshape,
    Affine,
    BatchNormTrain { xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { centered: Vec<T>, inv_std: Vec<T> },
    Relu,
    Sigmoid,
    Add,
    Mul,
    Sum,
    ConcatCols,
    MeanRows,
    SoftmaxCrossEntropy { probs: Vec<T>, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Result of a batch-norm forward: the output node plus the running
/// statistics after the momentum update (train mode only).
#[derive(Debug, Clone)]
pub struct BnOutput<T> {
    pub out: NodeId,
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BnParams<'a, T> {
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    tally: MacTally,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to graph leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `id`; zero for nodes the loss does not depend on.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        match self.grads.get_mut(id.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

fn dim_err<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::Dimension { op, lhs: a.to_vec(), rhs: b.to_vec() })
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false, tally: MacTally::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn tally(&self) -> &MacTally {
        &self.tally
    }

    /// Attribute subsequent MACs to `layer` under `kind`.
    pub fn set_scope(&mut self, layer: usize, kind: MacKind) {
        self.tally.scope = Some((layer, kind));
    }

    pub fn clear_scope(&mut self) {
        self.tally.scope = None;
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf (data, labels, precomputed weights).
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value: t, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value: t, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    fn geom(&self, x: NodeId, w_shape: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
        let xs = self.shape(x);
        if xs.len() != 4 || w_shape.len() != 4 || xs[1] != w_shape[1] || w_shape[2] != w_shape[3] {
            return dim_err("conv2d", xs, w_shape);
        }
        let k = w_shape[2];
        let bad = || Error::Geometry { op: "conv2d", input: xs.to_vec(), kernel: k, stride, padding };
        let h_out = ops::conv_out_len(xs[2], k, stride, padding).ok_or_else(bad)?;
        let w_out = ops::conv_out_len(xs[3], k, stride, padding).ok_or_else(bad)?;
        Ok(ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: w_shape[0],
            k,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    /// Cross-correlation with one shared kernel `[C_out, C_in, K, K]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geom = self.geom(x, self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return dim_err("conv2d bias", self.shape(b), &[geom.c_out]);
            }
        }
        self.conv_common(x, weight, bias, geom, false)
    }

    /// Cross-correlation with a different kernel per batch item:
    /// weight `[N, C_out, C_in, K, K]`, bias `[N, C_out]`.
    pub fn conv2d_per_sample(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 5 || ws[0] != self.shape(x)[0] {
            return dim_err("conv2d_per_sample", self.shape(x), &ws);
        }
        let geom = self.geom(x, &ws[1..], stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.batch, geom.c_out] {
                return dim_err("conv2d_per_sample bias", self.shape(b), &[geom.batch, geom.c_out]);
            }
        }
        self.conv_common(x, weight, bias, geom, true)
    }

    fn conv_common(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        per_sample: bool,
    ) -> Result<NodeId> {
        let out = ops::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            per_sample,
        );
        self.tally.record(MacKind::Base, geom.macs());
        let shape = vec![geom.batch, geom.c_out, geom.h_out, geom.w_out];
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            Op::Conv2d { geom, per_sample, bias: bias.is_some() },
            inputs,
            Tensor::from_parts(shape, out),
        ))
    }

    /// `out[i, ..] = sum_j a[i, j] b[j, ..]`; used to apply a channel
    /// alignment matrix along the output-channel axis of a kernel.
    pub fn matmul_lead(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.is_empty() || sa[1] != sb[0] {
            return dim_err("matmul_lead", &sa, &sb);
        }
        let (p, q) = (sa[0], sa[1]);
        let r: usize = sb[1..].iter().product();
        let out = ops::matmul_lead(self.value(a).data(), self.value(b).data(), p, q, r);
        self.tally.record(MacKind::Align, (p * q * r) as u64);
        let mut shape = sb;
        shape[0] = p;
        Ok(self.push(Op::MatMulLead { p, q, r }, vec![a, b], Tensor::from_parts(shape, out)))
    }

    /// Gate-weighted sum of `m` equally shaped sources. `coeffs` is `[m]`
    /// (one shared mixture, output has the source shape) or `[N, m]` (one
    /// mixture per row, output gains a leading `N` axis).
    pub fn mix(&mut self, coeffs: NodeId, sources: &[NodeId]) -> Result<NodeId> {
        let m = sources.len();
        let cs = self.shape(coeffs).to_vec();
        let rows = match cs.as_slice() {
            [k] if *k == m => None,
            [n, k] if *k == m => Some(*n),
            _ => return dim_err("mix", &cs, &[m]),
        };
        let s0 = self.shape(sources[0]).to_vec();
        for &s in sources {
            if self.shape(s) != s0.as_slice() {
                return dim_err("mix", &s0, self.shape(s));
            }
        }
        let srcs: Vec<&[T]> = sources.iter().map(|&s| self.value(s).data()).collect();
        let c = self.value(coeffs).data();
        let per = s0.iter().product::<usize>();
        let (shape, data) = match rows {
            None => (s0.clone(), ops::mix(c, &srcs)),
            Some(n) => {
                let mut data = Vec::with_capacity(n * per);
                for row in 0..n {
                    data.extend(ops::mix(&c[row * m..(row + 1) * m], &srcs));
                }
                let mut shape = vec![n];
                shape.extend_from_slice(&s0);
                (shape, data)
            }
        };
        self.tally.record(MacKind::Aggregation, (rows.unwrap_or(1) * m * per) as u64);
        let mut inputs = vec![coeffs];
        inputs.extend_from_slice(sources);
        Ok(self.push(Op::Mix, inputs, Tensor::from_parts(shape, data)))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err("global_avg_pool", &s, &[0, 0, 0, 0]);
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::of(hw as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        self.tally.record(MacKind::Gating, (s[0] * s[1] * hw) as u64);
        Ok(self.push(Op::GlobalAvgPool, vec![x], Tensor::from_parts(vec![s[0], s[1], 1, 1], data)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], v))
    }

    /// `[N, C, ...] -> [N, C * ...]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `out = x · weightᵀ + bias`.
    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(weight).to_vec(), self.shape(bias).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return dim_err("affine", &xs, &ws);
        }
        if bs != [ws[0]] {
            return dim_err("affine bias", &bs, &[ws[0]]);
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = vec![T::zero(); n * dout];
        for r in 0..n {
            let xr = &xv[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &wv[o * din..(o + 1) * din];
                let mut acc = T::zero();
                for (&a, &b) in xr.iter().zip(wr) {
                    acc += a * b;
                }
                out[r * dout + o] = acc + bv[o];
            }
        }
        self.tally.record(MacKind::Base, (n * din * dout) as u64);
        Ok(self.push(Op::Affine, vec![x, weight, bias], Tensor::from_parts(vec![n, dout], out)))
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BnParams<'_, T>,
        mode: BnMode,
    ) -> Result<BnOutput<T>> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err("batch_norm", &s, &[0, 0, 0, 0]);
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        for t in [self.shape(gamma), self.shape(beta), stats.running_mean.shape(), stats.running_var.shape()] {
            if t != [c] {
                return dim_err("batch_norm", &s, t);
            }
        }
        let eps = T::of(stats.eps);
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        match mode {
            BnMode::Train => {
                let count = n * hw;
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                let (mean, var) = ops::channel_moments(xv, n, c, hw);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); xv.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let xh = (xv[i] - mean[ch]) * inv_std[ch];
                            xhat[i] = xh;
                            out[i] = gv[ch] * xh + bv[ch];
                        }
                    }
                }
                let mom = T::of(stats.momentum);
                let unbias = T::of(count as f64 / (count - 1) as f64);
                let rm: Vec<T> = stats
                    .running_mean
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &m)| (T::one() - mom) * r + mom * m)
                    .collect();
                let rv: Vec<T> = stats
                    .running_var
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias)
                    .collect();
                let id = self.push(Op::BatchNormTrain { xhat, inv_std }, vec![x, gamma, beta], Tensor::from_parts(s, out));
                Ok(BnOutput {
                    out: id,
                    running_mean: Some(Tensor::from_parts(vec![c], rm)),
                    running_var: Some(Tensor::from_parts(vec![c], rv)),
                })
            }
            BnMode::Eval => {
                let rm = stats.running_mean.data();
                let inv_std: Vec<T> = stats.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut centered = vec![T::zero(); xv.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let xc = xv[i] - rm[ch];
                            centered[i] = xc;
                            out[i] = gv[ch] * (xc * inv_std[ch]) + bv[ch];
                        }
                    }
                }
                let id = self.push(Op::BatchNormEval { centered, inv_std }, vec![x, gamma, beta], Tensor::from_parts(s, out));
                Ok(BnOutput { out: id, running_mean: None, running_var: None })
            }
        }
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(Op::Relu, vec![x], v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(ops::sigmoid);
        self.push(Op::Sigmoid, vec![x], v)
    }

    /// Sigmoid whose output stays strictly inside (0, 1) even where the
    /// exact value rounds to an endpoint.
    pub fn sigmoid_open(&mut self, x: NodeId) -> NodeId {
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let lo = T::min_positive_value();
        let v = self.value(x).map(|a| ops::sigmoid(a).max(lo).min(hi));
        self.push(Op::Sigmoid, vec![x], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return dim_err("mul", va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], v)
    }

    /// Concatenates `[N, d_i]` tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return dim_err("concat_cols", self.shape(parts[0]), s);
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), Tensor::from_parts(vec![n, total], data)))
    }

    /// Column means of an `[N, d]` tensor.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return dim_err("mean_rows", &s, &[0, 0]);
        }
        let (n, d) = (s[0], s[1]);
        let v = self.value(x).data();
        let inv = T::one() / T::of(n as f64);
        let data = (0..d)
            .map(|j| (0..n).map(|r| v[r * d + j]).sum::<T>() * inv)
            .collect();
        Ok(self.push(Op::MeanRows, vec![x], Tensor::from_parts(vec![d], data)))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err("softmax_cross_entropy", &s, &[labels.len()]);
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let v = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &v[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / z;
            }
            loss += z.ln() - (row[labels[r]] - mx);
        }
        let loss = loss / T::of(n as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { probs, labels: labels.to_vec() },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape: a second
    /// call fails.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract("backward called twice on the same graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &self.nodes[i];
                match (g, &n.op) {
                    (Some(g), Op::Leaf) => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let inp = &node.inputs;
        let needs = |i: usize| self.nodes[inp[i].0].requires_grad;
        let val = |i: usize| self.nodes[inp[i].0].value.data();
        let mut acc = |i: usize, contrib: Vec<T>| accumulate(grads, inp[i], contrib);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { geom, per_sample, bias } => {
                let r = ops::conv2d_backward(val(0), val(1), g, geom, *per_sample, (needs(0), needs(1), *bias && needs(2)));
                if let Some(dx) = r.dx {
                    acc(0, dx);
                }
                if let Some(dw) = r.dw {
                    acc(1, dw);
                }
                if let Some(db) = r.db {
                    acc(2, db);
                }
            }
            Op::MatMulLead { p, q, r } => {
                let (da, db) = ops::matmul_lead_backward(val(0), val(1), g, *p, *q, *r);
                if needs(0) {
                    acc(0, da);
                }
                if needs(1) {
                    acc(1, db);
                }
            }
            Op::Mix => {
                let c = val(0);
                let m = inp.len() - 1;
                let per = self.nodes[inp[1].0].value.len();
                let rows = c.len() / m;
                if needs(0) {
                    let mut dc = vec![T::zero(); c.len()];
                    for r in 0..rows {
                        let gr = &g[r * per..(r + 1) * per];
                        for i in 0..m {
                            let mut s = T::zero();
                            for (&a, &b) in gr.iter().zip(val(i + 1)) {
                                s += a * b;
                            }
                            dc[r * m + i] = s;
                        }
                    }
                    acc(0, dc);
                }
                for i in 0..m {
                    if !needs(i + 1) {
                        continue;
                    }
                    let mut ds = vec![T::zero(); per];
                    for r in 0..rows {
                        let cv = c[r * m + i];
                        for (d, &gv) in ds.iter_mut().zip(&g[r * per..(r + 1) * per]) {
                            *d += cv * gv;
                        }
                    }
                    acc(i + 1, ds);
                }
            }
            Op::GlobalAvgPool => {
                let s = self.nodes[inp[0].0].value.shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(hw * g.len());
                for &gv in g {
                    dx.extend(core::iter::repeat_n(gv * inv, hw));
                }
                acc(0, dx);
            }
            Op::Reshape => acc(0, g.to_vec()),
            Op::Affine => {
                let (x, w) = (val(0), val(1));
                let dout = node.value.shape()[1];
                let n = node.value.shape()[0];
                let din = w.len() / dout;
                if needs(0) {
                    let mut dx = vec![T::zero(); n * din];
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for (d, &wv) in dx[r * din..(r + 1) * din].iter_mut().zip(&w[o * din..(o + 1) * din]) {
                                *d += gv * wv;
                            }
                        }
                    }
                    acc(0, dx);
                }
                if needs(1) {
                    let mut dw = vec![T::zero(); dout * din];
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for (d, &xv) in dw[o * din..(o + 1) * din].iter_mut().zip(&x[r * din..(r + 1) * din]) {
                                *d += gv * xv;
                            }
                        }
                    }
                    acc(1, dw);
                }
                if needs(2) {
                    let mut db = vec![T::zero(); dout];
                    for r in 0..n {
                        for o in 0..dout {
                            db[o] += g[r * dout + o];
                        }
                    }
                    acc(2, db);
                }
            }
            Op::BatchNormTrain { xhat, inv_std } => {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gamma = val(1);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if needs(0) {
                    let count = T::of((n * hw) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            // dxhat = g·gamma; sums of dxhat and dxhat·xhat are gamma·dbeta and gamma·dgamma.
                            let k = gamma[ch] * inv_std[ch] / count;
                            for i in base..base + hw {
                                dx[i] = k * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    acc(0, dx);
                }
                if needs(1) {
                    acc(1, dgamma);
                }
                if needs(2) {
                    acc(2, dbeta);
                }
            }
            Op::BatchNormEval { centered, inv_std } => {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gamma = val(1);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = g[i] * gamma[ch] * inv_std[ch];
                            dgamma[ch] += g[i] * centered[i] * inv_std[ch];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if needs(0) {
                    acc(0, dx);
                }
                if needs(1) {
                    acc(1, dgamma);
                }
                if needs(2) {
                    acc(2, dbeta);
                }
            }
            Op::Relu => {
                let x = val(0);
                acc(0, g.iter().zip(x).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect());
            }
            Op::Sigmoid => {
                let y = node.value.data();
                acc(0, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect());
            }
            Op::Add => {
                if needs(0) {
                    acc(0, g.to_vec());
                }
                if needs(1) {
                    acc(1, g.to_vec());
                }
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                if needs(0) {
                    acc(0, g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect());
                }
                if needs(1) {
                    acc(1, g.iter().zip(a).map(|(&gv, &av)| gv * av).collect());
                }
            }
            Op::Sum => {
                let n = self.nodes[inp[0].0].value.len();
                acc(0, vec![g[0]; n]);
            }
            Op::ConcatCols => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut offset = 0;
                for (i, &p) in inp.iter().enumerate() {
                    let w = self.nodes[p.0].value.shape()[1];
                    if needs(i) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(i, d);
                    }
                    offset += w;
                }
            }
            Op::MeanRows => {
                let s = self.nodes[inp[0].0].value.shape();
                let (n, d) = (s[0], s[1]);
                let inv = T::one() / T::of(n as f64);
                let mut dx = Vec::with_capacity(n * d);
                for _ in 0..n {
                    dx.extend(g.iter().map(|&gv| gv * inv));
                }
                acc(0, dx);
            }
            Op::SoftmaxCrossEntropy { probs, labels } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / T::of(n as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= scale;
                }
                acc(0, d);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv2d_single_patch_dot_product() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.input(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv2d_zero_and_identity_kernels() {
        let xs: Vec<f64> = (0..9).map(|i| i as f64 * 0.7 - 2.0).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 3, 3], &xs));
        let zero = g.input(Tensor::zeros(&[2, 1, 3, 3]));
        let one = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let yz = g.conv2d(x, zero, None, 1, 1).unwrap();
        assert!(g.value(yz).data().iter().all(|&v| v == 0.0));
        let yi = g.conv2d(x, one, None, 1, 0).unwrap();
        assert_eq!(g.value(yi).data(), xs.as_slice());
    }

    #[test]
    fn conv2d_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Dimension { .. })));
        let big = g.input(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(g.conv2d(x, big, None, 1, 0), Err(Error::Geometry { .. })));
    }

    #[test]
    fn global_avg_pool_means() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 1, 1]);
        assert_eq!(g.value(y).data(), &[2.5, 2.0]);
        let c = g.input(Tensor::full(&[2, 3, 4, 4], 1.75));
        let yc = g.global_avg_pool(c).unwrap();
        assert!(g.value(yc).data().iter().all(|&v| v == 1.75));
        let one = g.input(t(&[1, 3, 1, 1], &[1.0, -2.0, 3.5]));
        let y1 = g.global_avg_pool(one).unwrap();
        assert_eq!(g.value(y1).data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.input(t(&[2, 2], &[1.0, 1.0, 2.0, 0.0]));
        let b = g.input(t(&[2], &[0.0, 1.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);

        let x2 = g.input(t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
        let eye = g.input(Tensor::identity(2));
        let zb = g.input(Tensor::zeros(&[2]));
        let y2 = g.affine(x2, eye, zb).unwrap();
        assert_eq!(g.value(y2).data(), g.value(x2).data());

        let zw = g.input(Tensor::zeros(&[2, 2]));
        let bias = g.input(t(&[2], &[0.5, -1.0]));
        let y3 = g.affine(x2, zw, bias).unwrap();
        assert_eq!(g.value(y3).data(), &[0.5, -1.0, 0.5, -1.0]);

        let bad = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.affine(x, bad, b).is_err());
    }

    fn bn_stats(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0))
    }

    #[test]
    fn batch_norm_train_on_normalized_input_is_identity() {
        // per-channel zero mean, unit biased variance
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2, 1, 2], &[1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0]));
        let gamma = g.input(Tensor::full(&[2], 1.0));
        let beta = g.input(Tensor::zeros(&[2]));
        let (rm, rv) = bn_stats(2);
        let stats = BnParams { running_mean: &rm, running_var: &rv, momentum: 0.1, eps: 1e-12 };
        let out = g.batch_norm(x, gamma, beta, stats, BnMode::Train).unwrap();
        let diff = g.value(out.out).max_rel_diff(g.value(x), 1.0).unwrap();
        assert!(diff < 1e-5);
        // running var is stored unbiased: count 4 -> factor 4/3
        let rv_new = out.running_var.unwrap();
        assert!((rv_new.data()[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_gamma_zero_gives_beta() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 1, 1, 2], &[0.3, 5.0, -2.0, 1.0]));
        let gamma = g.input(Tensor::zeros(&[1]));
        let beta = g.input(t(&[1], &[0.75]));
        let (rm, rv) = bn_stats(1);
        let stats = BnParams { running_mean: &rm, running_var: &rv, momentum: 0.1, eps: 1e-5 };
        for mode in [BnMode::Train, BnMode::Eval] {
            let out = g.batch_norm(x, gamma, beta, stats, mode).unwrap();
            assert!(g.value(out.out).data().iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 1, 1], &[3.0]));
        let gamma = g.input(t(&[1], &[2.0]));
        let beta = g.input(Tensor::zeros(&[1]));
        let rm = t(&[1], &[1.0]);
        let rv = t(&[1], &[1.0]);
        let stats = BnParams { running_mean: &rm, running_var: &rv, momentum: 0.1, eps: 0.0 };
        let out = g.batch_norm(x, gamma, beta, stats, BnMode::Eval).unwrap();
        assert_eq!(g.value(out.out).data(), &[4.0]);
        assert!(matches!(
            g.batch_norm(x, gamma, beta, stats, BnMode::Train),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.activation(x, Activation::Relu);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.input(t(&[2], &[0.0, 0.25f64.ln()]));
        let s = g.activation(z, Activation::Sigmoid);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!((g.value(s).data()[1] - 0.2).abs() <= f64::EPSILON * 0.2);
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 2], &[0.0, 0.0]));
        let la = g.softmax_cross_entropy(a, &[0]).unwrap();
        assert!((g.value(la).data()[0] - core::f64::consts::LN_2).abs() < 1e-12);
        let b = g.input(t(&[1, 2], &[1e3, 0.0]));
        let lb = g.softmax_cross_entropy(b, &[0]).unwrap();
        assert!(g.value(lb).data()[0] < 1e-6);
        let c = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let lc = g.softmax_cross_entropy(c, &[2]).unwrap();
        let expected = libm::log(1.0 + libm::exp(-1.0) + libm::exp(-2.0));
        assert!((g.value(lc).data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.407606).abs() < 1e-6);
        assert!(matches!(g.softmax_cross_entropy(c, &[3]), Err(Error::Label { label: 3, classes: 3 })));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[0.0]));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[0.25]);
    }

    #[test]
    fn pointwise_conv_weight_gradient_is_spatial_sum() {
        let xs: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2, 3, 3], &xs));
        let w = g.param(t(&[1, 2, 1, 1], &[0.3, -0.8]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let dw = grads.get(w);
        for c in 0..2 {
            let expected: f64 = (0..2).map(|n| xs[(n * 2 + c) * 9..][..9].iter().sum::<f64>()).sum();
            assert!((dw.data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_an_error_and_non_scalar_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sigmoid(x);
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        let l = g.sum(s);
        assert!(g.backward(l).is_ok());
        assert!(matches!(g.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_exact_zeros() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn tally_attributes_macs_to_scopes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 16, 8, 8]));
        let w = g.input(Tensor::zeros(&[16, 16, 3, 3]));
        g.set_scope(0, MacKind::Base);
        g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.tally().layer(0).base, 147_456);
    }
}
