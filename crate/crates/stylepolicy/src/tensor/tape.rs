//! Define-by-run tape: nodes hold values computed eagerly at creation time,
//! so a graph is rebuilt per training step and dropped afterwards.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Identifier of a node on a tape. Inputs always precede a node, so the
/// insertion order is a topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds. Constant attributes live here; tensor inputs are in
/// `Node::inputs`.
#[derive(Clone, Debug)]
pub enum OpKind<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Exp,
    Log,
    Sigmoid,
    Neg,
    Abs,
    LeakyRelu { slope: T },
    Clamp { lo: T, hi: T },
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    MatMul,
    /// Cross-channel 2-D convolution, stride 1, odd kernel, reflect padding.
    Conv2d { pad: usize },
    /// One shared 2-D kernel applied to every channel independently.
    DepthwiseConv2d { pad: usize },
    MeanPool2,
    GlobalSpatialMean,
    ChannelMean,
    SoftmaxLast,
    LogSoftmaxLast,
    Gather { indices: Vec<usize> },
    Concat0,
    Stack0,
    Reshape,
    AddRowVec,
    MulBatchScalar,
    Nll { labels: Vec<usize> },
}

impl<T> OpKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Pow => "pow",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Neg => "neg",
            OpKind::Abs => "abs",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Clamp { .. } => "clamp",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::SumAxis { .. } => "sum_axis",
            OpKind::MeanAxis { .. } => "mean_axis",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            OpKind::MeanPool2 => "mean_pool2",
            OpKind::GlobalSpatialMean => "global_spatial_mean",
            OpKind::ChannelMean => "channel_mean",
            OpKind::SoftmaxLast => "softmax_last",
            OpKind::LogSoftmaxLast => "log_softmax_last",
            OpKind::Gather { .. } => "gather",
            OpKind::Concat0 => "concat0",
            OpKind::Stack0 => "stack0",
            OpKind::Reshape => "reshape",
            OpKind::AddRowVec => "add_rowvec",
            OpKind::MulBatchScalar => "mul_batch_scalar",
            OpKind::Nll { .. } => "nll",
        }
    }
}

#[derive(Debug)]
pub struct Node<T> {
    pub(crate) op: OpKind<T>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
}

impl<T: Real> Node<T> {
    pub fn op(&self) -> &OpKind<T> {
        &self.op
    }
    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// How an elementwise binary op broadcasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

pub struct Tape<T = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Forward values for the requested nodes (they are computed eagerly at
    /// node construction, so this is a lookup).
    pub fn evaluate(&self, outputs: &[NodeId]) -> Vec<Tensor<T>> {
        outputs.iter().map(|&id| self.value(id).clone()).collect()
    }

    fn push(&mut self, op: OpKind<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: OpKind::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ── Elementwise binary with scalar broadcast ─────────────────────

    pub(crate) fn broadcast_of(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Broadcast> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(a).numel() == 1 {
            Ok(Broadcast::LhsScalar)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::RhsScalar)
        } else {
            Err(Error::ShapeMismatch {
                op,
                node: self.nodes.len(),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        kind: OpKind<T>,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        let bc = self.broadcast_of(kind.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = match bc {
            Broadcast::Same => {
                let data = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(va.shape().to_vec(), data)?
            }
            Broadcast::LhsScalar => {
                let s = va.data()[0];
                Tensor::new(vb.shape().to_vec(), vb.data().iter().map(|&y| f(s, y)).collect())?
            }
            Broadcast::RhsScalar => {
                let s = vb.data()[0];
                Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x, s)).collect())?
            }
        };
        Ok(self.push(kind, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Div, a, b, |x, y| x / y)
    }

    /// Elementwise `base ^ exponent`; the base must be strictly positive.
    pub fn pow(&mut self, base: NodeId, exponent: NodeId) -> Result<NodeId> {
        if self.value(base).data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::invalid(
                "pow requires a strictly positive base".to_string(),
            ));
        }
        self.binary(OpKind::Pow, base, exponent, |b, e| b.powf(e))
    }

    pub fn add_scalar(&mut self, a: NodeId, v: T) -> Result<NodeId> {
        let s = self.scalar(v);
        self.add(a, s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, v: T) -> Result<NodeId> {
        let s = self.scalar(v);
        self.mul(a, s)
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, kind: OpKind<T>, a: NodeId, f: impl Fn(T) -> T) -> NodeId {
        let value = self.value(a).map(f);
        self.push(kind, vec![a], value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(OpKind::Exp, a, |x| x.exp())
    }

    /// Natural logarithm; input must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::invalid("log requires strictly positive input"));
        }
        Ok(self.unary(OpKind::Log, a, |x| x.ln()))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(OpKind::Sigmoid, a, sigmoid_stable)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(OpKind::Neg, a, |x| -x)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(OpKind::Abs, a, |x| x.abs())
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        self.unary(OpKind::LeakyRelu { slope }, a, |x| {
            if x >= T::zero() {
                x
            } else {
                x * slope
            }
        })
    }

    /// Clamp into `[lo, hi]`. The subgradient is identity inside the range
    /// and at the exact boundary, zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::invalid(format!("clamp bounds [{lo}, {hi}] empty")));
        }
        Ok(self.unary(OpKind::Clamp { lo, hi }, a, |x| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        }))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_f64();
        let value = Tensor::scalar(T::of_f64(s));
        self.push(OpKind::SumAll, vec![a], value)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a).mean_f64();
        let value = Tensor::scalar(T::of_f64(m));
        self.push(OpKind::MeanAll, vec![a], value)
    }

    fn axis_reduce(&mut self, kind: OpKind<T>, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let va = self.value(a);
        if axis >= va.shape().len() {
            return Err(Error::invalid(format!(
                "reduction axis {axis} out of range for shape {:?}",
                va.shape()
            )));
        }
        let (outer, len, inner) = axis_strides(va.shape(), axis);
        let mut acc = vec![0f64; outer * inner];
        let data = va.data();
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let dst = &mut acc[o * inner..(o + 1) * inner];
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += data[base + i].as_f64();
                }
            }
        }
        let denom = if mean { len as f64 } else { 1.0 };
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, acc.iter().map(|&v| T::of_f64(v / denom)).collect())?;
        Ok(self.push(kind, vec![a], value))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(OpKind::SumAxis { axis }, a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(OpKind::MeanAxis { axis }, a, axis, true)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                node: self.nodes.len(),
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mat_mul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(OpKind::MatMul, vec![a, b], value))
    }

    /// `x` of shape (m, n) plus a length-n row vector.
    pub fn add_rowvec(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_rowvec",
                node: self.nodes.len(),
                lhs: sx,
                rhs: sb,
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let xb = self.value(x).data();
        let bb = self.value(bias).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xb[i * n + j] + bb[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(OpKind::AddRowVec, vec![x, bias], value))
    }

    /// `x` with leading batch axis times a per-batch scalar vector.
    pub fn mul_batch_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let ss = self.value(s).shape().to_vec();
        if sx.is_empty() || ss != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "mul_batch_scalar",
                node: self.nodes.len(),
                lhs: sx,
                rhs: ss,
            });
        }
        let batch = sx[0];
        let stride = self.value(x).numel() / batch;
        let xd = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            let sb = sd[b];
            for i in 0..stride {
                out[b * stride + i] = xd[b * stride + i] * sb;
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(OpKind::MulBatchScalar, vec![x, s], value))
    }

    // ── Convolution and pooling ──────────────────────────────────────

    /// Cross-channel convolution: input (B, Cin, H, W), kernel
    /// (Cout, Cin, k, k) with odd k, stride 1, reflect padding.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        let ok = si.len() == 4
            && sk.len() == 4
            && sk[1] == si[1]
            && sk[2] == sk[3]
            && sk[2] % 2 == 1;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                node: self.nodes.len(),
                lhs: si,
                rhs: sk,
            });
        }
        let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, k) = (sk[0], sk[2]);
        let pad = k / 2;
        let ckk = cin * k * k;
        let hw = h * w;
        let mut out = vec![T::zero(); b * cout * hw];
        let mut col = vec![T::zero(); ckk * hw];
        let xin = self.value(input).data();
        let ker = self.value(kernel).data();
        for bi in 0..b {
            im2col(&xin[bi * cin * hw..(bi + 1) * cin * hw], cin, h, w, k, pad, &mut col);
            mat_mul_acc(ker, &col, cout, ckk, hw, &mut out[bi * cout * hw..(bi + 1) * cout * hw]);
        }
        let value = Tensor::new(vec![b, cout, h, w], out)?;
        Ok(self.push(OpKind::Conv2d { pad }, vec![input, kernel], value))
    }

    /// One shared 2-D kernel applied per channel; input (C, H, W) or
    /// (B, C, H, W), kernel (k, k) with odd k.
    pub fn depthwise_conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        let ok = (si.len() == 3 || si.len() == 4)
            && sk.len() == 2
            && sk[0] == sk[1]
            && sk[0] % 2 == 1;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                node: self.nodes.len(),
                lhs: si,
                rhs: sk,
            });
        }
        let ndim = si.len();
        let (h, w) = (si[ndim - 2], si[ndim - 1]);
        let channels = self.value(input).numel() / (h * w);
        let k = sk[0];
        let pad = k / 2;
        let xin = self.value(input).data();
        let ker = self.value(kernel).data();
        let ymap = reflect_map(h, k, pad);
        let xmap = reflect_map(w, k, pad);
        let mut out = vec![T::zero(); xin.len()];
        for c in 0..channels {
            let plane = &xin[c * h * w..(c + 1) * h * w];
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        let row = &plane[ymap[y * k + dy] * w..];
                        let krow = &ker[dy * k..(dy + 1) * k];
                        for dx in 0..k {
                            acc = acc + row[xmap[x * k + dx]] * krow[dx];
                        }
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
        let value = Tensor::new(si, out)?;
        Ok(self.push(OpKind::DepthwiseConv2d { pad }, vec![input, kernel], value))
    }

    /// Factor-2 mean pooling over the trailing two axes (must be even).
    pub fn mean_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let ndim = si.len();
        if ndim < 2 || si[ndim - 2] % 2 != 0 || si[ndim - 1] % 2 != 0 {
            return Err(Error::invalid(format!(
                "mean_pool2 needs even trailing dims, got shape {si:?}"
            )));
        }
        let (h, w) = (si[ndim - 2], si[ndim - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = self.value(input).numel() / (h * w);
        let xin = self.value(input).data();
        let quarter = T::of_f64(0.25);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xin[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let s = src[2 * y * w + 2 * x]
                        + src[2 * y * w + 2 * x + 1]
                        + src[(2 * y + 1) * w + 2 * x]
                        + src[(2 * y + 1) * w + 2 * x + 1];
                    dst[y * ow + x] = s * quarter;
                }
            }
        }
        let mut shape = si.clone();
        shape[ndim - 2] = oh;
        shape[ndim - 1] = ow;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(OpKind::MeanPool2, vec![input], value))
    }

    /// Mean over the trailing spatial axes: (B, C, H, W) → (B, C) or
    /// (C, H, W) → (C).
    pub fn global_spatial_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        if si.len() != 3 && si.len() != 4 {
            return Err(Error::invalid(format!(
                "global_spatial_mean expects 3-D or 4-D input, got {si:?}"
            )));
        }
        let ndim = si.len();
        let (h, w) = (si[ndim - 2], si[ndim - 1]);
        let planes = self.value(input).numel() / (h * w);
        let xin = self.value(input).data();
        let mut out = Vec::with_capacity(planes);
        for p in 0..planes {
            let s: f64 = xin[p * h * w..(p + 1) * h * w]
                .iter()
                .map(|v| v.as_f64())
                .sum();
            out.push(T::of_f64(s / (h * w) as f64));
        }
        let shape = si[..ndim - 2].to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(OpKind::GlobalSpatialMean, vec![input], value))
    }

    /// Replace every channel by the per-pixel mean over channels;
    /// input (C, H, W) or (B, C, H, W), output the same shape.
    pub fn channel_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        if si.len() != 3 && si.len() != 4 {
            return Err(Error::invalid(format!(
                "channel_mean expects 3-D or 4-D input, got {si:?}"
            )));
        }
        let out = channel_mean_values(self.value(input))?;
        Ok(self.push(OpKind::ChannelMean, vec![input], out))
    }

    // ── Softmax family ───────────────────────────────────────────────

    pub fn softmax_last(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax_last on empty shape"))?;
        let rows = v.numel() / last;
        let mut out = vec![T::zero(); v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * last..(r + 1) * last];
            let dst = &mut out[r * last..(r + 1) * last];
            softmax_row(row, dst);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(OpKind::SoftmaxLast, vec![input], value))
    }

    pub fn log_softmax_last(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("log_softmax_last on empty shape"))?;
        let rows = v.numel() / last;
        let mut out = vec![T::zero(); v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * last..(r + 1) * last];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse: f64 = row.iter().map(|&x| (x - mx).as_f64().exp()).sum();
            let lse = T::of_f64(lse.ln());
            let dst = &mut out[r * last..(r + 1) * last];
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = x - mx - lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(OpKind::LogSoftmaxLast, vec![input], value))
    }

    /// Negative log-likelihood: `logp` of shape (B, C), one label per row;
    /// returns the scalar `-mean_i logp[i, labels[i]]`.
    pub fn nll(&mut self, logp: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logp);
        if v.shape().len() != 2 || v.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "nll: logp shape {:?} does not match {} labels",
                v.shape(),
                labels.len()
            )));
        }
        let classes = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "nll: label {bad} out of range for {classes} classes"
            )));
        }
        let mut acc = 0f64;
        for (i, &y) in labels.iter().enumerate() {
            acc -= v.data()[i * classes + y].as_f64();
        }
        let value = Tensor::scalar(T::of_f64(acc / labels.len() as f64));
        Ok(self.push(
            OpKind::Nll {
                labels: labels.to_vec(),
            },
            vec![logp],
            value,
        ))
    }

    // ── Shape manipulation ───────────────────────────────────────────

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        Ok(self.push(OpKind::Reshape, vec![input], value))
    }

    /// Pick flat coordinates into a 1-D tensor. The backward pass
    /// scatter-adds, which is how sorting is differentiated through: indices
    /// are a fixed permutation chosen from forward values.
    pub fn gather(&mut self, input: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let v = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                v.numel()
            )));
        }
        let data: Vec<T> = indices.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::from_vec(data);
        Ok(self.push(OpKind::Gather { indices }, vec![input], value))
    }

    pub fn concat0(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat0 needs at least one input"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let mut dim0 = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    node: self.nodes.len(),
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            dim0 += s[0];
        }
        let mut data = Vec::with_capacity(dim0 * first[1..].iter().product::<usize>());
        for &id in inputs {
            data.extend_from_slice(self.value(id).data());
        }
        let mut shape = first;
        shape[0] = dim0;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(OpKind::Concat0, inputs.to_vec(), value))
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid("stack0 needs at least one input"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        for &id in inputs {
            if self.value(id).shape() != first.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack0",
                    node: self.nodes.len(),
                    lhs: first,
                    rhs: self.value(id).shape().to_vec(),
                });
            }
        }
        let mut data = Vec::with_capacity(inputs.len() * self.value(inputs[0]).numel());
        for &id in inputs {
            data.extend_from_slice(self.value(id).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&first);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(OpKind::Stack0, inputs.to_vec(), value))
    }
}

// ── Shared numeric kernels ───────────────────────────────────────────

#[inline]
pub(crate) fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row<T: Real>(row: &[T], dst: &mut [T]) {
    let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = 0f64;
    for (d, &x) in dst.iter_mut().zip(row) {
        let e = (x - mx).exp();
        sum += e.as_f64();
        *d = e;
    }
    let inv = T::of_f64(1.0 / sum);
    for d in dst.iter_mut() {
        *d = *d * inv;
    }
}

/// Edge-inclusive reflection: -1 → 0, -2 → 1, n → n-1, n+1 → n-2. With a
/// symmetric kernel this padding preserves the image sum exactly.
#[inline]
pub(crate) fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Lookup table of reflected source indices: entry [i * k + d] is the source
/// index for output position i under kernel offset d.
pub(crate) fn reflect_map(n: usize, k: usize, pad: usize) -> Vec<usize> {
    let mut map = vec![0usize; n * k];
    for i in 0..n {
        for d in 0..k {
            map[i * k + d] = reflect_index(i as isize + d as isize - pad as isize, n);
        }
    }
    map
}

pub(crate) fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// `out += a @ b` for row-major a (m×k), b (k×n).
pub(crate) fn mat_mul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Unfold one image (Cin, H, W) into a (Cin·k·k, H·W) patch matrix with
/// reflect padding.
pub(crate) fn im2col<T: Real>(
    img: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), cin * k * k * h * w);
    let hw = h * w;
    let ymap = reflect_map(h, k, pad);
    let xmap = reflect_map(w, k, pad);
    let mut row = 0;
    for c in 0..cin {
        let plane = &img[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let src = &plane[ymap[y * k + dy] * w..];
                    let out = &mut dst[y * w..(y + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        *o = src[xmap[x * k + dx]];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Per-pixel channel mean broadcast back over channels, f64-accumulated so
/// the op is exactly idempotent.
pub(crate) fn channel_mean_values<T: Real>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = v.shape().to_vec();
    let ndim = shape.len();
    let (c, h, w) = (shape[ndim - 3], shape[ndim - 2], shape[ndim - 1]);
    let batch = v.numel() / (c * h * w);
    let hw = h * w;
    let data = v.data();
    let mut out = vec![T::zero(); v.numel()];
    for b in 0..batch {
        let base = b * c * hw;
        for p in 0..hw {
            let mut acc = 0f64;
            for ch in 0..c {
                acc += data[base + ch * hw + p].as_f64();
            }
            let m = T::of_f64(acc / c as f64);
            for ch in 0..c {
                out[base + ch * hw + p] = m;
            }
        }
    }
    Tensor::new(shape, out)
}
