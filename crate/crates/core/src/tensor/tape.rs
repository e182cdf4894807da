//! Reverse-mode automatic differentiation over [`TensorValue`]s.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`Tape::backward`] replays it once in reverse, accumulating
//! gradients additively across fan-out. Tapes are confined to one worker
//! and dropped after use; parameter snapshots live outside the tape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::conv;
use crate::tensor::value::{
    broadcast_shape, broadcast_strides, reduce_to_shape, strides_for, TensorValue,
};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Softplus,
    Sigmoid,
}

enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: TensorId, b: TensorId },
    Unary { kind: UnaryKind, a: TensorId },
    AddScalar { a: TensorId },
    Scale { a: TensorId, c: f64 },
    Matmul { a: TensorId, b: TensorId },
    Conv2d { input: TensorId, kernel: TensorId, bias: TensorId, stride: usize, pad: usize },
    ConvT2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    Concat { parts: Vec<TensorId>, axis: usize },
    Narrow { a: TensorId, axis: usize, start: usize },
    Reshape { a: TensorId },
    RepeatRows { a: TensorId, times: usize },
    Sum { a: TensorId, axes: Vec<usize> },
    Mean { a: TensorId, axes: Vec<usize> },
    LogSumExp { a: TensorId, axis: usize, keepdims: bool },
    /// Identity in the forward pass; scales the gradient of row `i` of a
    /// [rows, ...] tensor by `factors[i]` in the backward pass. Factors may
    /// be filled in after the forward pass has run.
    GradScaleRows { a: TensorId, factors: Rc<RefCell<Vec<f64>>> },
}

struct Node {
    value: TensorValue,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<TensorValue>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&TensorValue> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<TensorValue> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: TensorId) -> &TensorValue {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: TensorValue, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: TensorValue, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: TensorValue) -> TensorId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(TensorValue::scalar(v))
    }

    /// Same values, no gradient tracking.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a.0].value.clone();
        self.leaf(v, false)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        if va.shape() == vb.shape() {
            for (o, (x, y)) in out.iter_mut().zip(va.data().iter().zip(vb.data())) {
                *o = f(*x, *y);
            }
        } else {
            let (ad, bd) = (va.data(), vb.data());
            let mut i = 0;
            for_each_bc2(&out_shape, va.shape(), vb.shape(), |ia, ib| {
                out[i] = f(ad[ia], bd[ib]);
                i += 1;
            });
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let value = TensorValue::new(out_shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, needs))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary_infallible(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary_infallible(UnaryKind::Exp, a)
    }

    /// Natural logarithm; rejects nonpositive input.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(bad) = self.nodes[a.0].value.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of nonpositive value {bad}")));
        }
        Ok(self.unary_infallible(UnaryKind::Log, a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(bad) = self.nodes[a.0].value.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary_infallible(UnaryKind::Sqrt, a))
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary_infallible(UnaryKind::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary_infallible(UnaryKind::Sigmoid, a)
    }

    fn unary_infallible(&mut self, kind: UnaryKind, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Softplus => softplus(x),
                UnaryKind::Sigmoid => sigmoid(x),
            })
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        let value = TensorValue::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Unary { kind, a }, needs)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| x + c).collect();
        let needs = self.nodes[a.0].needs_grad;
        let value = TensorValue::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::AddScalar { a }, needs)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| x * c).collect();
        let needs = self.nodes[a.0].needs_grad;
        let value = TensorValue::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { a, c }, needs)
    }

    // ---- linear algebra --------------------------------------------------

    /// [m, k] x [k, n] -> [m, n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, ka) = (va.shape()[0], va.shape()[1]);
        let (kb, n) = (vb.shape()[0], vb.shape()[1]);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(va.data(), vb.data(), m, ka, n, &mut out);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let value = TensorValue::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    // ---- convolutions ----------------------------------------------------

    /// input [N, C, W, H], kernel [O, C, k, k], bias [O].
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        let vi = &self.nodes[input.0].value;
        let vk = &self.nodes[kernel.0].value;
        let vb = &self.nodes[bias.0].value;
        if vi.rank() != 4 || vk.rank() != 4 {
            return Err(Error::Shape("conv2d expects 4-d input and kernel".into()));
        }
        let (n, c, w, h) = dims4(vi.shape());
        let (o, ck, k, k2) = dims4(vk.shape());
        if ck != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {ck}"
            )));
        }
        if k != k2 {
            return Err(Error::Shape("conv2d kernel must be square".into()));
        }
        if vb.shape() != [o] {
            return Err(Error::Shape("conv2d bias must be [out_channels]".into()));
        }
        if stride == 2 && (w % 2 != 0 || h % 2 != 0) {
            return Err(Error::Shape(format!(
                "stride-2 conv needs even extents, got {w}x{h}"
            )));
        }
        let pad = k / 2;
        let ow = conv::conv_out_extent(w, k, stride, pad);
        let oh = conv::conv_out_extent(h, k, stride, pad);
        let mut out = vec![0.0; n * o * ow * oh];
        conv::conv2d_forward(
            vi.data(),
            n,
            c,
            w,
            h,
            vk.data(),
            vb.data(),
            o,
            k,
            stride,
            pad,
            &mut out,
        );
        let needs = self.nodes[input.0].needs_grad
            || self.nodes[kernel.0].needs_grad
            || self.nodes[bias.0].needs_grad;
        let value = TensorValue::new(vec![n, o, ow, oh], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, stride, pad }, needs))
    }

    /// input [N, C, W, H], kernel [C, O, k, k], bias [O]. Stride 2 doubles
    /// spatial extents, stride 1 preserves them.
    pub fn conv_transpose2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        let vi = &self.nodes[input.0].value;
        let vk = &self.nodes[kernel.0].value;
        let vb = &self.nodes[bias.0].value;
        if vi.rank() != 4 || vk.rank() != 4 {
            return Err(Error::Shape("conv_transpose2d expects 4-d input and kernel".into()));
        }
        let (n, c, w, h) = dims4(vi.shape());
        let (ck, o, k, k2) = dims4(vk.shape());
        if ck != c {
            return Err(Error::Shape(format!(
                "conv_transpose2d channel mismatch: input has {c}, kernel expects {ck}"
            )));
        }
        if k != k2 {
            return Err(Error::Shape("conv_transpose2d kernel must be square".into()));
        }
        if vb.shape() != [o] {
            return Err(Error::Shape("conv_transpose2d bias must be [out_channels]".into()));
        }
        let pad = k / 2;
        let out_pad = if stride == 2 { 1 } else { 0 };
        let ow = conv::conv_transpose_out_extent(w, k, stride, pad, out_pad);
        let oh = conv::conv_transpose_out_extent(h, k, stride, pad, out_pad);
        let mut out = vec![0.0; n * o * ow * oh];
        conv::conv_transpose2d_forward(
            vi.data(),
            n,
            c,
            w,
            h,
            vk.data(),
            vb.data(),
            o,
            k,
            stride,
            pad,
            out_pad,
            &mut out,
        );
        let needs = self.nodes[input.0].needs_grad
            || self.nodes[kernel.0].needs_grad
            || self.nodes[bias.0].needs_grad;
        let value = TensorValue::new(vec![n, o, ow, oh], out)?;
        Ok(self.push(
            value,
            Op::ConvT2d { input, kernel, bias, stride, pad, out_pad },
            needs,
        ))
    }

    // ---- structure -------------------------------------------------------

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Axis { axis, rank: first.len() });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::Shape(format!(
                    "concat shapes differ outside axis {axis}: {:?} vs {:?}",
                    first, s
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        for oi in 0..outer {
            let mut offset = 0;
            for p in parts {
                let v = &self.nodes[p.0].value;
                let pa = v.shape()[axis];
                let src = &v.data()[oi * pa * inner..(oi + 1) * pa * inner];
                let dst_start = (oi * axis_total + offset) * inner;
                out[dst_start..dst_start + pa * inner].copy_from_slice(src);
                offset += pa;
            }
        }
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        let value = TensorValue::new(out_shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        if start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow {start}..{} exceeds extent {} on axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for oi in 0..outer {
            let src = (oi * full + start) * inner;
            let dst = oi * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&va.data()[src..src + len * inner]);
        }
        let needs = self.nodes[a.0].needs_grad;
        let value = TensorValue::new(out_shape, out)?;
        Ok(self.push(value, Op::Narrow { a, axis, start }, needs))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let value = va.clone().reshaped(shape)?;
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    /// Repeat each leading-axis row `times` times: row i maps to rows
    /// i*times..(i+1)*times of the result.
    pub fn repeat_rows(&mut self, a: TensorId, times: usize) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        if va.rank() == 0 {
            return Err(Error::Shape("repeat_rows needs rank >= 1".into()));
        }
        let rows = va.shape()[0];
        let inner: usize = va.shape()[1..].iter().product();
        let mut out = vec![0.0; rows * times * inner];
        for r in 0..rows {
            let src = &va.data()[r * inner..(r + 1) * inner];
            for t in 0..times {
                let dst = (r * times + t) * inner;
                out[dst..dst + inner].copy_from_slice(src);
            }
        }
        let mut out_shape = va.shape().to_vec();
        out_shape[0] = rows * times;
        let needs = self.nodes[a.0].needs_grad;
        let value = TensorValue::new(out_shape, out)?;
        Ok(self.push(value, Op::RepeatRows { a, times }, needs))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: TensorId, axes: &[usize], keepdims: bool) -> Result<TensorId> {
        self.reduce_sum_like(a, axes, keepdims, false)
    }

    pub fn mean(&mut self, a: TensorId, axes: &[usize], keepdims: bool) -> Result<TensorId> {
        self.reduce_sum_like(a, axes, keepdims, true)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.nodes[a.0].value.rank()).collect();
        self.sum(a, &axes, false)
    }

    fn reduce_sum_like(
        &mut self,
        a: TensorId,
        axes: &[usize],
        keepdims: bool,
        mean: bool,
    ) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        validate_axes(axes, shape.len())?;
        let kept = reduced_shape(&shape, axes, true);
        let out_shape = if keepdims {
            kept.clone()
        } else {
            reduced_shape(&shape, axes, false)
        };
        let out_numel: usize = kept.iter().product();
        let mut out = vec![0.0; out_numel];
        let in_strides = strides_for(&shape);
        let kept_strides = broadcast_strides(&kept, &shape);
        // accumulate: walk input once
        let mut coords = vec![0usize; shape.len()];
        for (flat, &v) in va.data().iter().enumerate() {
            let _ = flat;
            let mut o = 0;
            for d in 0..shape.len() {
                o += coords[d] * kept_strides[d];
            }
            out[o] += v;
            for d in (0..shape.len()).rev() {
                coords[d] += 1;
                if coords[d] < shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        if mean {
            let inv = 1.0 / count as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let _ = in_strides;
        let needs = self.nodes[a.0].needs_grad;
        let value = TensorValue::new(out_shape, out)?;
        let op = if mean {
            Op::Mean { a, axes: axes.to_vec() }
        } else {
            Op::Sum { a, axes: axes.to_vec() }
        };
        Ok(self.push(value, op, needs))
    }

    /// Numerically stable log-sum-exp along one axis:
    /// max(v) + ln(sum(exp(v - max))).
    pub fn logsumexp(&mut self, a: TensorId, axis: usize, keepdims: bool) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if extent == 0 {
            return Err(Error::Shape("logsumexp over empty axis".into()));
        }
        let mut out = vec![0.0; outer * inner];
        let data = va.data();
        for oi in 0..outer {
            for ii in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for e in 0..extent {
                    m = m.max(data[(oi * extent + e) * inner + ii]);
                }
                let mut s = 0.0;
                for e in 0..extent {
                    s += (data[(oi * extent + e) * inner + ii] - m).exp();
                }
                out[oi * inner + ii] = m + s.ln();
            }
        }
        let mut out_shape = shape.clone();
        if keepdims {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let needs = self.nodes[a.0].needs_grad;
        let value = TensorValue::new(out_shape, out)?;
        Ok(self.push(value, Op::LogSumExp { a, axis, keepdims }, needs))
    }

    // ---- gradient plumbing -------------------------------------------------

    /// Forward identity whose backward multiplies the gradient of row `i`
    /// by `factors[i]`. The factor vector may be written after the forward
    /// pass (it must be filled before `backward`).
    pub fn grad_scale_rows(
        &mut self,
        a: TensorId,
        factors: Rc<RefCell<Vec<f64>>>,
    ) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        if va.rank() == 0 {
            return Err(Error::Shape("grad_scale_rows needs rank >= 1".into()));
        }
        let value = va.clone();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::GradScaleRows { a, factors }, needs))
    }

    /// Reverse sweep from a scalar loss. Visits each recorded operation
    /// exactly once, in reverse creation order; fan-out accumulates
    /// additively. Deterministic: identical tapes give bit-identical grads.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<TensorValue>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorValue::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().expect("checked");
            self.step_backward(id, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<TensorValue>], id: TensorId, contrib: TensorValue) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn step_backward(&self, id: usize, g: &TensorValue, grads: &mut [Option<TensorValue>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let out_shape = self.nodes[id].value.shape();
                let (ga_full, gb_full): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (g.data().to_vec(), g.data().to_vec()),
                    BinaryKind::Sub => {
                        (g.data().to_vec(), g.data().iter().map(|x| -x).collect())
                    }
                    BinaryKind::Mul => {
                        let mut ga = vec![0.0; g.numel()];
                        let mut gb = vec![0.0; g.numel()];
                        let (ad, bd, gd) = (va.data(), vb.data(), g.data());
                        let mut i = 0;
                        for_each_bc2(out_shape, va.shape(), vb.shape(), |ia, ib| {
                            ga[i] = gd[i] * bd[ib];
                            gb[i] = gd[i] * ad[ia];
                            i += 1;
                        });
                        (ga, gb)
                    }
                    BinaryKind::Div => {
                        let mut ga = vec![0.0; g.numel()];
                        let mut gb = vec![0.0; g.numel()];
                        let (ad, bd, gd) = (va.data(), vb.data(), g.data());
                        let mut i = 0;
                        for_each_bc2(out_shape, va.shape(), vb.shape(), |ia, ib| {
                            ga[i] = gd[i] / bd[ib];
                            gb[i] = -gd[i] * ad[ia] / (bd[ib] * bd[ib]);
                            i += 1;
                        });
                        (ga, gb)
                    }
                };
                if self.nodes[a.0].needs_grad {
                    let ra = reduce_to_shape(&ga_full, out_shape, va.shape());
                    self.accumulate(
                        grads,
                        *a,
                        TensorValue::new(va.shape().to_vec(), ra).expect("shape"),
                    );
                }
                if self.nodes[b.0].needs_grad {
                    let rb = reduce_to_shape(&gb_full, out_shape, vb.shape());
                    self.accumulate(
                        grads,
                        *b,
                        TensorValue::new(vb.shape().to_vec(), rb).expect("shape"),
                    );
                }
            }
            Op::Unary { kind, a } => {
                let va = &self.nodes[a.0].value;
                let out = &self.nodes[id].value;
                let data: Vec<f64> = match kind {
                    UnaryKind::Neg => g.data().iter().map(|x| -x).collect(),
                    UnaryKind::Exp => g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gi, oi)| gi * oi)
                        .collect(),
                    UnaryKind::Log => g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(gi, xi)| gi / xi)
                        .collect(),
                    UnaryKind::Sqrt => g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gi, oi)| gi / (2.0 * oi))
                        .collect(),
                    UnaryKind::Softplus => g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(gi, xi)| gi * sigmoid(*xi))
                        .collect(),
                    UnaryKind::Sigmoid => g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gi, oi)| gi * oi * (1.0 - oi))
                        .collect(),
                };
                self.accumulate(
                    grads,
                    *a,
                    TensorValue::new(va.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::AddScalar { a } => {
                let va = &self.nodes[a.0].value;
                self.accumulate(
                    grads,
                    *a,
                    TensorValue::new(va.shape().to_vec(), g.data().to_vec()).expect("shape"),
                );
            }
            Op::Scale { a, c } => {
                let va = &self.nodes[a.0].value;
                let data: Vec<f64> = g.data().iter().map(|x| x * c).collect();
                self.accumulate(
                    grads,
                    *a,
                    TensorValue::new(va.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::Matmul { a, b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].needs_grad {
                    // dA = G.B^T : [m,n]x[n,k]
                    let mut ga = vec![0.0; m * k];
                    matmul_bt(g.data(), vb.data(), m, n, k, &mut ga);
                    self.accumulate(grads, *a, TensorValue::new(vec![m, k], ga).expect("shape"));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T.G : [k,m]x[m,n]
                    let mut gb = vec![0.0; k * n];
                    matmul_at(va.data(), g.data(), m, k, n, &mut gb);
                    self.accumulate(grads, *b, TensorValue::new(vec![k, n], gb).expect("shape"));
                }
            }
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                let vi = &self.nodes[input.0].value;
                let vk = &self.nodes[kernel.0].value;
                let (n, c, w, h) = dims4(vi.shape());
                let o = vk.shape()[0];
                let k = vk.shape()[2];
                let mut gi = vec![0.0; vi.numel()];
                let mut gk = vec![0.0; vk.numel()];
                let mut gb = vec![0.0; o];
                conv::conv2d_backward(
                    vi.data(),
                    n,
                    c,
                    w,
                    h,
                    vk.data(),
                    o,
                    k,
                    *stride,
                    *pad,
                    g.data(),
                    &mut gi,
                    &mut gk,
                    &mut gb,
                );
                self.accumulate(
                    grads,
                    *input,
                    TensorValue::new(vi.shape().to_vec(), gi).expect("shape"),
                );
                self.accumulate(
                    grads,
                    *kernel,
                    TensorValue::new(vk.shape().to_vec(), gk).expect("shape"),
                );
                self.accumulate(grads, *bias, TensorValue::new(vec![o], gb).expect("shape"));
            }
            Op::ConvT2d { input, kernel, bias, stride, pad, out_pad } => {
                let vi = &self.nodes[input.0].value;
                let vk = &self.nodes[kernel.0].value;
                let (n, c, w, h) = dims4(vi.shape());
                let o = vk.shape()[1];
                let k = vk.shape()[2];
                let mut gi = vec![0.0; vi.numel()];
                let mut gk = vec![0.0; vk.numel()];
                let mut gb = vec![0.0; o];
                conv::conv_transpose2d_backward(
                    vi.data(),
                    n,
                    c,
                    w,
                    h,
                    vk.data(),
                    o,
                    k,
                    *stride,
                    *pad,
                    *out_pad,
                    g.data(),
                    &mut gi,
                    &mut gk,
                    &mut gb,
                );
                self.accumulate(
                    grads,
                    *input,
                    TensorValue::new(vi.shape().to_vec(), gi).expect("shape"),
                );
                self.accumulate(
                    grads,
                    *kernel,
                    TensorValue::new(vk.shape().to_vec(), gk).expect("shape"),
                );
                self.accumulate(grads, *bias, TensorValue::new(vec![o], gb).expect("shape"));
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let vp = &self.nodes[p.0].value;
                    let pa = vp.shape()[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut gp = vec![0.0; vp.numel()];
                        for oi in 0..outer {
                            let src = (oi * total + offset) * inner;
                            let dst = oi * pa * inner;
                            gp[dst..dst + pa * inner]
                                .copy_from_slice(&g.data()[src..src + pa * inner]);
                        }
                        self.accumulate(
                            grads,
                            *p,
                            TensorValue::new(vp.shape().to_vec(), gp).expect("shape"),
                        );
                    }
                    offset += pa;
                }
            }
            Op::Narrow { a, axis, start } => {
                let va = &self.nodes[a.0].value;
                let out_shape = self.nodes[id].value.shape();
                let len = out_shape[*axis];
                let full = va.shape()[*axis];
                let outer: usize = va.shape()[..*axis].iter().product();
                let inner: usize = va.shape()[*axis + 1..].iter().product();
                let mut ga = vec![0.0; va.numel()];
                for oi in 0..outer {
                    let dst = (oi * full + start) * inner;
                    let src = oi * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(
                    grads,
                    *a,
                    TensorValue::new(va.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::Reshape { a } => {
                let va = &self.nodes[a.0].value;
                self.accumulate(
                    grads,
                    *a,
                    TensorValue::new(va.shape().to_vec(), g.data().to_vec()).expect("shape"),
                );
            }
            Op::RepeatRows { a, times } => {
                let va = &self.nodes[a.0].value;
                let rows = va.shape()[0];
                let inner: usize = va.shape()[1..].iter().product();
                let mut ga = vec![0.0; va.numel()];
                for r in 0..rows {
                    for t in 0..*times {
                        let src = (r * times + t) * inner;
                        for i in 0..inner {
                            ga[r * inner + i] += g.data()[src + i];
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    TensorValue::new(va.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::Sum { a, axes } => {
                let va = &self.nodes[a.0].value;
                let kept = reduced_shape(va.shape(), axes, true);
                self.spread_reduced(grads, *a, g, &kept, 1.0);
            }
            Op::Mean { a, axes } => {
                let va = &self.nodes[a.0].value;
                let kept = reduced_shape(va.shape(), axes, true);
                let count: usize = axes.iter().map(|&ax| va.shape()[ax]).product();
                self.spread_reduced(grads, *a, g, &kept, 1.0 / count as f64);
            }
            Op::LogSumExp { a, axis, keepdims } => {
                let va = &self.nodes[a.0].value;
                let out = &self.nodes[id].value;
                let shape = va.shape();
                let outer: usize = shape[..*axis].iter().product();
                let extent = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let _ = keepdims; // out/g have outer*inner elements either way
                let mut ga = vec![0.0; va.numel()];
                for oi in 0..outer {
                    for ii in 0..inner {
                        let l = out.data()[oi * inner + ii];
                        let gi = g.data()[oi * inner + ii];
                        for e in 0..extent {
                            let idx = (oi * extent + e) * inner + ii;
                            ga[idx] = gi * (va.data()[idx] - l).exp();
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    TensorValue::new(shape.to_vec(), ga).expect("shape"),
                );
            }
            Op::GradScaleRows { a, factors } => {
                let va = &self.nodes[a.0].value;
                let rows = va.shape()[0];
                let inner: usize = va.shape()[1..].iter().product();
                let f = factors.borrow();
                assert_eq!(
                    f.len(),
                    rows,
                    "grad_scale_rows factors must match leading extent"
                );
                let mut ga = vec![0.0; va.numel()];
                for r in 0..rows {
                    let fr = f[r];
                    for i in 0..inner {
                        ga[r * inner + i] = g.data()[r * inner + i] * fr;
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    TensorValue::new(va.shape().to_vec(), ga).expect("shape"),
                );
            }
        }
    }

    fn spread_reduced(
        &self,
        grads: &mut [Option<TensorValue>],
        a: TensorId,
        g: &TensorValue,
        kept_shape: &[usize],
        scale: f64,
    ) {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        let kept_strides = broadcast_strides(kept_shape, shape);
        let mut ga = vec![0.0; va.numel()];
        let mut coords = vec![0usize; shape.len()];
        for gout in ga.iter_mut() {
            let mut o = 0;
            for d in 0..shape.len() {
                o += coords[d] * kept_strides[d];
            }
            *gout = g.data()[o] * scale;
            for d in (0..shape.len()).rev() {
                coords[d] += 1;
                if coords[d] < shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        self.accumulate(grads, a, TensorValue::new(shape.to_vec(), ga).expect("shape"));
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

fn validate_axes(axes: &[usize], rank: usize) -> Result<()> {
    for &ax in axes {
        if ax >= rank {
            return Err(Error::Axis { axis: ax, rank });
        }
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (d, &e) in shape.iter().enumerate() {
        if axes.contains(&d) {
            if keepdims {
                out.push(1);
            }
        } else {
            out.push(e);
        }
    }
    out
}

/// Walk every element of `out_shape` in row-major order, yielding the flat
/// indices of the two broadcast operands.
fn for_each_bc2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..numel {
        f(ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                ia += sa[d];
                ib += sb[d];
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * (out_shape[d] - 1);
            ib -= sb[d] * (out_shape[d] - 1);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

/// out[m,k] = g[m,n] . b[k,n]^T
fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            let gr = &g[i * n..(i + 1) * n];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                s += gr[j] * br[j];
            }
            out[i * k + p] = s;
        }
    }
}

/// out[k,n] = a[m,k]^T . g[m,n]
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gr = &g[i * n..(i + 1) * n];
            let or = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] += av * gr[j];
            }
        }
    }
}
