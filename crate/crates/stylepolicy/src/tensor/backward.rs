//! Reverse-mode accumulation over the tape's topological order.

use super::tape::{axis_strides, channel_mean_values, im2col, mat_mul_acc, reflect_map};
use super::{NodeId, OpKind, Real, Tape, Tensor};
use crate::error::{Error, Result};

/// Gradients of one scalar loss with respect to tape nodes.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or a zero tensor of its shape when the node was
    /// never reached (an unreachable requires-grad leaf has zero gradient).
    pub fn get_or_zero(&self, tape: &Tape<T>, id: NodeId) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

impl<T: Real> Tape<T> {
    /// Reverse-mode gradients of a scalar loss node. Subgraphs that do not
    /// require gradients are skipped.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        // Unreached requires-grad leaves get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad
                && matches!(node.op, OpKind::Leaf)
                && grads[i].is_none()
            {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        match &node.op {
            OpKind::Leaf => {}
            OpKind::Add => {
                self.binary_backward(inputs[0], inputs[1], g, grads, |_, _| T::one(), |_, _| {
                    T::one()
                });
            }
            OpKind::Sub => {
                self.binary_backward(
                    inputs[0],
                    inputs[1],
                    g,
                    grads,
                    |_, _| T::one(),
                    |_, _| -T::one(),
                );
            }
            OpKind::Mul => {
                self.binary_backward(inputs[0], inputs[1], g, grads, |_, b| b, |a, _| a);
            }
            OpKind::Div => {
                self.binary_backward(
                    inputs[0],
                    inputs[1],
                    g,
                    grads,
                    |_, b| T::one() / b,
                    |a, b| -a / (b * b),
                );
            }
            OpKind::Pow => {
                // Reuse the stored output: d/da a^b = b*out/a (a > 0) and
                // d/db = out*ln(a), avoiding powf in the backward pass.
                let out = &node.value;
                self.binary_backward_with_out(
                    inputs[0],
                    inputs[1],
                    out,
                    g,
                    grads,
                    |a, b, o| b * o / a,
                    |a, _, o| o * a.ln(),
                );
            }
            OpKind::Exp => {
                let out = &node.value;
                self.unary_backward(inputs[0], g, grads, |idx| out.data()[idx]);
            }
            OpKind::Log => {
                let a = self.value(inputs[0]);
                self.unary_backward(inputs[0], g, grads, |idx| T::one() / a.data()[idx]);
            }
            OpKind::Sigmoid => {
                let out = &node.value;
                self.unary_backward(inputs[0], g, grads, |idx| {
                    let s = out.data()[idx];
                    s * (T::one() - s)
                });
            }
            OpKind::Neg => {
                self.unary_backward(inputs[0], g, grads, |_| -T::one());
            }
            OpKind::Abs => {
                let a = self.value(inputs[0]);
                self.unary_backward(inputs[0], g, grads, |idx| {
                    let x = a.data()[idx];
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
            }
            OpKind::LeakyRelu { slope } => {
                let a = self.value(inputs[0]);
                let slope = *slope;
                self.unary_backward(inputs[0], g, grads, |idx| {
                    if a.data()[idx] >= T::zero() {
                        T::one()
                    } else {
                        slope
                    }
                });
            }
            OpKind::Clamp { lo, hi } => {
                let a = self.value(inputs[0]);
                let (lo, hi) = (*lo, *hi);
                self.unary_backward(inputs[0], g, grads, |idx| {
                    let x = a.data()[idx];
                    if x >= lo && x <= hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
            }
            OpKind::SumAll => {
                if self.needs(inputs[0]) {
                    let gv = g.item();
                    let shape = self.value(inputs[0]).shape();
                    accumulate(grads, inputs[0], Tensor::full(shape, gv))?;
                }
            }
            OpKind::MeanAll => {
                if self.needs(inputs[0]) {
                    let n = self.value(inputs[0]).numel();
                    let gv = g.item() * T::of_f64(1.0 / n as f64);
                    let shape = self.value(inputs[0]).shape();
                    accumulate(grads, inputs[0], Tensor::full(shape, gv))?;
                }
            }
            OpKind::SumAxis { axis } | OpKind::MeanAxis { axis } => {
                if self.needs(inputs[0]) {
                    let shape = self.value(inputs[0]).shape().to_vec();
                    let (outer, len, inner) = axis_strides(&shape, *axis);
                    let scale = if matches!(node.op, OpKind::MeanAxis { .. }) {
                        T::of_f64(1.0 / len as f64)
                    } else {
                        T::one()
                    };
                    let mut da = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for k in 0..inner {
                                da[base + k] = g.data()[o * inner + k] * scale;
                            }
                        }
                    }
                    accumulate(grads, inputs[0], Tensor::new(shape, da)?)?;
                }
            }
            OpKind::MatMul => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if self.needs(inputs[0]) {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        let grow = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &b.data()[p * n..(p + 1) * n];
                            let mut acc = T::zero();
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc = acc + *gv * *bv;
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    accumulate(grads, inputs[0], Tensor::new(vec![m, k], da)?)?;
                }
                if self.needs(inputs[1]) {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        let grow = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = a.data()[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv = *dv + aip * *gv;
                            }
                        }
                    }
                    accumulate(grads, inputs[1], Tensor::new(vec![k, n], db)?)?;
                }
            }
            OpKind::Conv2d { pad } => {
                self.conv2d_backward(inputs[0], inputs[1], *pad, g, grads)?;
            }
            OpKind::DepthwiseConv2d { pad } => {
                self.depthwise_backward(inputs[0], inputs[1], *pad, g, grads)?;
            }
            OpKind::MeanPool2 => {
                if self.needs(inputs[0]) {
                    let shape = self.value(inputs[0]).shape().to_vec();
                    let ndim = shape.len();
                    let (h, w) = (shape[ndim - 2], shape[ndim - 1]);
                    let (oh, ow) = (h / 2, w / 2);
                    let planes = self.value(inputs[0]).numel() / (h * w);
                    let quarter = T::of_f64(0.25);
                    let mut da = vec![T::zero(); planes * h * w];
                    for p in 0..planes {
                        let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut da[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = gs[y * ow + x] * quarter;
                                dst[2 * y * w + 2 * x] = gv;
                                dst[2 * y * w + 2 * x + 1] = gv;
                                dst[(2 * y + 1) * w + 2 * x] = gv;
                                dst[(2 * y + 1) * w + 2 * x + 1] = gv;
                            }
                        }
                    }
                    accumulate(grads, inputs[0], Tensor::new(shape, da)?)?;
                }
            }
            OpKind::GlobalSpatialMean => {
                if self.needs(inputs[0]) {
                    let shape = self.value(inputs[0]).shape().to_vec();
                    let ndim = shape.len();
                    let (h, w) = (shape[ndim - 2], shape[ndim - 1]);
                    let planes = self.value(inputs[0]).numel() / (h * w);
                    let inv = T::of_f64(1.0 / (h * w) as f64);
                    let mut da = vec![T::zero(); planes * h * w];
                    for p in 0..planes {
                        let gv = g.data()[p] * inv;
                        for v in &mut da[p * h * w..(p + 1) * h * w] {
                            *v = gv;
                        }
                    }
                    accumulate(grads, inputs[0], Tensor::new(shape, da)?)?;
                }
            }
            OpKind::ChannelMean => {
                if self.needs(inputs[0]) {
                    // The Jacobian is symmetric: the backward map is the op itself.
                    accumulate(grads, inputs[0], channel_mean_values(g)?)?;
                }
            }
            OpKind::SoftmaxLast => {
                if self.needs(inputs[0]) {
                    let out = &node.value;
                    let last = *out.shape().last().unwrap();
                    let rows = out.numel() / last;
                    let mut da = vec![T::zero(); out.numel()];
                    for r in 0..rows {
                        let s = &out.data()[r * last..(r + 1) * last];
                        let gr = &g.data()[r * last..(r + 1) * last];
                        let dot: f64 = s
                            .iter()
                            .zip(gr)
                            .map(|(sv, gv)| sv.as_f64() * gv.as_f64())
                            .sum();
                        let dot = T::of_f64(dot);
                        let dst = &mut da[r * last..(r + 1) * last];
                        for ((d, &sv), &gv) in dst.iter_mut().zip(s).zip(gr) {
                            *d = sv * (gv - dot);
                        }
                    }
                    accumulate(grads, inputs[0], Tensor::new(out.shape().to_vec(), da)?)?;
                }
            }
            OpKind::LogSoftmaxLast => {
                if self.needs(inputs[0]) {
                    let out = &node.value;
                    let last = *out.shape().last().unwrap();
                    let rows = out.numel() / last;
                    let mut da = vec![T::zero(); out.numel()];
                    for r in 0..rows {
                        let y = &out.data()[r * last..(r + 1) * last];
                        let gr = &g.data()[r * last..(r + 1) * last];
                        let gsum: f64 = gr.iter().map(|v| v.as_f64()).sum();
                        let gsum = T::of_f64(gsum);
                        let dst = &mut da[r * last..(r + 1) * last];
                        for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gr) {
                            *d = gv - yv.exp() * gsum;
                        }
                    }
                    accumulate(grads, inputs[0], Tensor::new(out.shape().to_vec(), da)?)?;
                }
            }
            OpKind::Gather { indices } => {
                if self.needs(inputs[0]) {
                    let mut da = Tensor::zeros(self.value(inputs[0]).shape());
                    for (slot, &idx) in indices.iter().enumerate() {
                        da.data_mut()[idx] = da.data_mut()[idx] + g.data()[slot];
                    }
                    accumulate(grads, inputs[0], da)?;
                }
            }
            OpKind::Concat0 => {
                let mut offset = 0;
                for &inp in inputs {
                    let n = self.value(inp).numel();
                    if self.needs(inp) {
                        let shape = self.value(inp).shape().to_vec();
                        let part = Tensor::new(shape, g.data()[offset..offset + n].to_vec())?;
                        accumulate(grads, inp, part)?;
                    }
                    offset += n;
                }
            }
            OpKind::Stack0 => {
                let n = self.value(inputs[0]).numel();
                for (slot, &inp) in inputs.iter().enumerate() {
                    if self.needs(inp) {
                        let shape = self.value(inp).shape().to_vec();
                        let part =
                            Tensor::new(shape, g.data()[slot * n..(slot + 1) * n].to_vec())?;
                        accumulate(grads, inp, part)?;
                    }
                }
            }
            OpKind::Reshape => {
                if self.needs(inputs[0]) {
                    let shape = self.value(inputs[0]).shape().to_vec();
                    accumulate(grads, inputs[0], g.reshaped(shape)?)?;
                }
            }
            OpKind::AddRowVec => {
                let (m, n) = {
                    let s = self.value(inputs[0]).shape();
                    (s[0], s[1])
                };
                if self.needs(inputs[0]) {
                    accumulate(grads, inputs[0], g.clone())?;
                }
                if self.needs(inputs[1]) {
                    let mut db = vec![0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.data()[i * n + j].as_f64();
                        }
                    }
                    accumulate(
                        grads,
                        inputs[1],
                        Tensor::from_vec(db.iter().map(|&v| T::of_f64(v)).collect()),
                    )?;
                }
            }
            OpKind::MulBatchScalar => {
                let x = self.value(inputs[0]);
                let s = self.value(inputs[1]);
                let batch = s.numel();
                let stride = x.numel() / batch;
                if self.needs(inputs[0]) {
                    let mut dx = vec![T::zero(); x.numel()];
                    for b in 0..batch {
                        let sv = s.data()[b];
                        for i in 0..stride {
                            dx[b * stride + i] = g.data()[b * stride + i] * sv;
                        }
                    }
                    accumulate(grads, inputs[0], Tensor::new(x.shape().to_vec(), dx)?)?;
                }
                if self.needs(inputs[1]) {
                    let mut ds = vec![0f64; batch];
                    for b in 0..batch {
                        for i in 0..stride {
                            ds[b] += g.data()[b * stride + i].as_f64()
                                * x.data()[b * stride + i].as_f64();
                        }
                    }
                    accumulate(
                        grads,
                        inputs[1],
                        Tensor::from_vec(ds.iter().map(|&v| T::of_f64(v)).collect()),
                    )?;
                }
            }
            OpKind::Nll { labels } => {
                if self.needs(inputs[0]) {
                    let shape = self.value(inputs[0]).shape().to_vec();
                    let classes = shape[1];
                    let scale = -g.item() * T::of_f64(1.0 / labels.len() as f64);
                    let mut da = Tensor::zeros(&shape);
                    for (i, &y) in labels.iter().enumerate() {
                        da.data_mut()[i * classes + y] = scale;
                    }
                    accumulate(grads, inputs[0], da)?;
                }
            }
        }
        Ok(())
    }

    /// Backward for elementwise binaries with scalar broadcast. `da`/`db`
    /// compute local partials from the (a, b) values at one coordinate.
    fn binary_backward(
        &self,
        a: NodeId,
        b: NodeId,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
        da: impl Fn(T, T) -> T,
        db: impl Fn(T, T) -> T,
    ) {
        let va = self.value(a);
        let vb = self.value(b);
        let out = g.shape();
        let a_scalar = va.numel() == 1 && va.shape() != out;
        let b_scalar = vb.numel() == 1 && vb.shape() != out;
        let n = g.numel();
        let at = |i: usize| {
            if a_scalar {
                va.data()[0]
            } else {
                va.data()[i]
            }
        };
        let bt = |i: usize| {
            if b_scalar {
                vb.data()[0]
            } else {
                vb.data()[i]
            }
        };
        if self.needs(a) {
            if a_scalar {
                let mut acc = 0f64;
                for i in 0..n {
                    acc += (g.data()[i] * da(at(i), bt(i))).as_f64();
                }
                let t = Tensor::scalar(T::of_f64(acc));
                let reshaped = t.reshaped(va.shape().to_vec()).unwrap();
                accumulate_infallible(grads, a, reshaped);
            } else {
                let mut dv = vec![T::zero(); n];
                for (i, d) in dv.iter_mut().enumerate() {
                    *d = g.data()[i] * da(at(i), bt(i));
                }
                accumulate_infallible(grads, a, Tensor::new(va.shape().to_vec(), dv).unwrap());
            }
        }
        if self.needs(b) {
            if b_scalar {
                let mut acc = 0f64;
                for i in 0..n {
                    acc += (g.data()[i] * db(at(i), bt(i))).as_f64();
                }
                let t = Tensor::scalar(T::of_f64(acc));
                let reshaped = t.reshaped(vb.shape().to_vec()).unwrap();
                accumulate_infallible(grads, b, reshaped);
            } else {
                let mut dv = vec![T::zero(); n];
                for (i, d) in dv.iter_mut().enumerate() {
                    *d = g.data()[i] * db(at(i), bt(i));
                }
                accumulate_infallible(grads, b, Tensor::new(vb.shape().to_vec(), dv).unwrap());
            }
        }
    }

    /// Like `binary_backward` but local partials may read the stored output
    /// value at the same coordinate.
    #[allow(clippy::too_many_arguments)]
    fn binary_backward_with_out(
        &self,
        a: NodeId,
        b: NodeId,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
        da: impl Fn(T, T, T) -> T,
        db: impl Fn(T, T, T) -> T,
    ) {
        let va = self.value(a);
        let vb = self.value(b);
        let a_scalar = va.numel() == 1 && va.shape() != g.shape();
        let b_scalar = vb.numel() == 1 && vb.shape() != g.shape();
        let n = g.numel();
        let at = |i: usize| if a_scalar { va.data()[0] } else { va.data()[i] };
        let bt = |i: usize| if b_scalar { vb.data()[0] } else { vb.data()[i] };
        if self.needs(a) {
            if a_scalar {
                let mut acc = 0f64;
                for i in 0..n {
                    acc += (g.data()[i] * da(at(i), bt(i), out.data()[i])).as_f64();
                }
                let t = Tensor::scalar(T::of_f64(acc));
                accumulate_infallible(grads, a, t.reshaped(va.shape().to_vec()).unwrap());
            } else {
                let mut dv = vec![T::zero(); n];
                for (i, d) in dv.iter_mut().enumerate() {
                    *d = g.data()[i] * da(at(i), bt(i), out.data()[i]);
                }
                accumulate_infallible(grads, a, Tensor::new(va.shape().to_vec(), dv).unwrap());
            }
        }
        if self.needs(b) {
            if b_scalar {
                let mut acc = 0f64;
                for i in 0..n {
                    acc += (g.data()[i] * db(at(i), bt(i), out.data()[i])).as_f64();
                }
                let t = Tensor::scalar(T::of_f64(acc));
                accumulate_infallible(grads, b, t.reshaped(vb.shape().to_vec()).unwrap());
            } else {
                let mut dv = vec![T::zero(); n];
                for (i, d) in dv.iter_mut().enumerate() {
                    *d = g.data()[i] * db(at(i), bt(i), out.data()[i]);
                }
                accumulate_infallible(grads, b, Tensor::new(vb.shape().to_vec(), dv).unwrap());
            }
        }
    }

    fn unary_backward(
        &self,
        a: NodeId,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
        local: impl Fn(usize) -> T,
    ) {
        if !self.needs(a) {
            return;
        }
        let n = g.numel();
        let mut dv = vec![T::zero(); n];
        for (i, d) in dv.iter_mut().enumerate() {
            *d = g.data()[i] * local(i);
        }
        let shape = self.value(a).shape().to_vec();
        accumulate_infallible(grads, a, Tensor::new(shape, dv).unwrap());
    }

    fn conv2d_backward(
        &self,
        input: NodeId,
        kernel: NodeId,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        let vi = self.value(input);
        let vk = self.value(kernel);
        let (b, cin, h, w) = (
            vi.shape()[0],
            vi.shape()[1],
            vi.shape()[2],
            vi.shape()[3],
        );
        let (cout, k) = (vk.shape()[0], vk.shape()[2]);
        let ckk = cin * k * k;
        let hw = h * w;
        let need_in = self.needs(input);
        let need_k = self.needs(kernel);
        if !need_in && !need_k {
            return Ok(());
        }

        let mut col = vec![T::zero(); ckk * hw];
        let mut dk = vec![T::zero(); cout * ckk];
        let mut din = if need_in {
            vec![T::zero(); vi.numel()]
        } else {
            Vec::new()
        };
        // k^T once for the input gradient.
        let mut kt = vec![T::zero(); ckk * cout];
        if need_in {
            for o in 0..cout {
                for r in 0..ckk {
                    kt[r * cout + o] = vk.data()[o * ckk + r];
                }
            }
        }
        let mut dcol = vec![T::zero(); ckk * hw];
        for bi in 0..b {
            let img = &vi.data()[bi * cin * hw..(bi + 1) * cin * hw];
            let gout = &g.data()[bi * cout * hw..(bi + 1) * cout * hw];
            if need_k {
                im2col(img, cin, h, w, k, pad, &mut col);
                // dK[o, r] += sum_x gout[o, x] * col[r, x]
                for o in 0..cout {
                    let grow = &gout[o * hw..(o + 1) * hw];
                    let drow = &mut dk[o * ckk..(o + 1) * ckk];
                    for r in 0..ckk {
                        let crow = &col[r * hw..(r + 1) * hw];
                        let mut acc = T::zero();
                        for (gv, cv) in grow.iter().zip(crow) {
                            acc = acc + *gv * *cv;
                        }
                        drow[r] = drow[r] + acc;
                    }
                }
            }
            if need_in {
                dcol.iter_mut().for_each(|v| *v = T::zero());
                mat_mul_acc(&kt, gout, ckk, cout, hw, &mut dcol);
                // col2im scatter with the same reflect indexing as forward.
                let ymap = reflect_map(h, k, pad);
                let xmap = reflect_map(w, k, pad);
                let dst = &mut din[bi * cin * hw..(bi + 1) * cin * hw];
                let mut row = 0;
                for c in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let src = &dcol[row * hw..(row + 1) * hw];
                            for y in 0..h {
                                let base = c * hw + ymap[y * k + dy] * w;
                                for x in 0..w {
                                    let t = base + xmap[x * k + dx];
                                    dst[t] = dst[t] + src[y * w + x];
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
        if need_k {
            accumulate(grads, kernel, Tensor::new(vk.shape().to_vec(), dk)?)?;
        }
        if need_in {
            accumulate(grads, input, Tensor::new(vi.shape().to_vec(), din)?)?;
        }
        Ok(())
    }

    fn depthwise_backward(
        &self,
        input: NodeId,
        kernel: NodeId,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        let vi = self.value(input);
        let vk = self.value(kernel);
        let ndim = vi.shape().len();
        let (h, w) = (vi.shape()[ndim - 2], vi.shape()[ndim - 1]);
        let channels = vi.numel() / (h * w);
        let k = vk.shape()[0];
        let need_in = self.needs(input);
        let need_k = self.needs(kernel);
        if !need_in && !need_k {
            return Ok(());
        }
        let ymap = reflect_map(h, k, pad);
        let xmap = reflect_map(w, k, pad);
        let mut din = vec![T::zero(); vi.numel()];
        let mut dk = vec![0f64; k * k];
        for c in 0..channels {
            let plane = &vi.data()[c * h * w..(c + 1) * h * w];
            let gp = &g.data()[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let gv = gp[y * w + x];
                    for dy in 0..k {
                        let base = ymap[y * k + dy] * w;
                        for dx in 0..k {
                            let s = base + xmap[x * k + dx];
                            if need_in {
                                din[c * h * w + s] =
                                    din[c * h * w + s] + gv * vk.data()[dy * k + dx];
                            }
                            if need_k {
                                dk[dy * k + dx] += gv.as_f64() * plane[s].as_f64();
                            }
                        }
                    }
                }
            }
        }
        if need_in {
            accumulate(grads, input, Tensor::new(vi.shape().to_vec(), din)?)?;
        }
        if need_k {
            accumulate(
                grads,
                kernel,
                Tensor::new(
                    vk.shape().to_vec(),
                    dk.iter().map(|&v| T::of_f64(v)).collect(),
                )?,
            )?;
        }
        Ok(())
    }
}

fn accumulate<T: Real>(
    grads: &mut Vec<Option<Tensor<T>>>,
    id: NodeId,
    contribution: Tensor<T>,
) -> Result<()> {
    accumulate_infallible(grads, id, contribution);
    Ok(())
}

fn accumulate_infallible<T: Real>(
    grads: &mut Vec<Option<Tensor<T>>>,
    id: NodeId,
    contribution: Tensor<T>,
) {
    match &mut grads[id.index()] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), contribution.shape());
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e = *e + *c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
