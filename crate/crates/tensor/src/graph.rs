//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns gradients for every parameter that took part. A graph can be
//! differentiated once; build a new one for the next step.
//!
//! Image tensors use the `[N, C, H, W]` layout throughout.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Result, TensorError};
use crate::params::{ParamId, Params};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
        // im2col buffers, one [K, P] block per batch item; empty for 1x1 convs.
        cols: Vec<f32>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Hadamard(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    GlobalAvgPool(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Tensor,
    },
    BceWithLogits {
        logits: Var,
        target: Tensor,
    },
    Custom {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to an input created by [`Graph::input_with_grad`].
    pub fn input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sums another gradient set into this one (mini-batch accumulation).
    pub fn accumulate(&mut self, other: Gradients) -> Result<()> {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    self.params.insert(id, g);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.params.values_mut() {
            g.scale(factor);
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    frozen: HashSet<ParamId>,
    record: bool,
    finished: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

/// `c = a · b + beta * c` on row-major buffers; `ta`/`tb` read the stored
/// matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    beta: f32,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose presence is asserted by the callers' shape checks.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + j - pad` is in bounds.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j).div_ceil(self.stride);
        let hi = if self.w + self.pad > j {
            ((self.w + self.pad - j - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        let base = lo * self.stride + j - self.pad;
                        if self.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                        } else {
                            for (k, o) in out[lo..hi].iter_mut().enumerate() {
                                *o = src[base + k * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let p = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(j);
                    if lo >= hi {
                        continue;
                    }
                    let base = lo * self.stride + j - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        let g = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if self.stride == 1 {
                            for (d, v) in dst[base..base + hi - lo].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (k, v) in g.iter().enumerate() {
                                dst[base + k * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: HashSet::new(),
            record: true,
            finished: false,
        }
    }

    /// A graph for inference only: intermediate buffers needed by
    /// backward are not kept, and `backward` reports a detached graph.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    /// Parameters added after this call are treated as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, false, Op::Leaf)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, true, Op::Leaf)
    }

    pub fn param(&mut self, params: &Params, id: ParamId) -> Result<Var> {
        let trainable = !self.frozen.contains(&id);
        self.push("param", params.get(id).clone(), trainable, Op::Param(id))
    }

    /// 2-D convolution: x `[N,C,H,W]`, w `[O,C,kh,kw]`, b `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if xt.shape().len() != 4 || wt.shape().len() != 4 {
            return Err(mismatch("conv2d", xt, wt));
        }
        let (n, c, h, wd) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
        let (o, wc, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        if wc != c {
            return Err(mismatch("conv2d", xt, wt));
        }
        if bt.shape() != [o] {
            return Err(mismatch("conv2d bias", wt, bt));
        }
        if spec.stride == 0 || h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
            return Err(invalid("conv2d", xt, format!("kernel {kh}x{kw} does not fit with {spec:?}")));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho: (h + 2 * spec.pad - kh) / spec.stride + 1,
            wo: (wd + 2 * spec.pad - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.pad,
        };
        let k = c * kh * kw;
        let p = geom.ho * geom.wo;
        let pointwise = geom.is_pointwise();
        let mut out = vec![0.0f32; n * o * p];
        let mut cols = if pointwise { Vec::new() } else { vec![0.0f32; n * k * p] };
        let xin = xt.data();
        for s in 0..n {
            let x_s = &xin[s * c * h * wd..(s + 1) * c * h * wd];
            let col: &[f32] = if pointwise {
                x_s
            } else {
                let buf = &mut cols[s * k * p..(s + 1) * k * p];
                geom.im2col(x_s, buf);
                buf
            };
            let out_s = &mut out[s * o * p..(s + 1) * o * p];
            for (oc, row) in out_s.chunks_mut(p).enumerate() {
                row.fill(bt.data()[oc]);
            }
            gemm(o, k, p, wt.data(), false, col, false, out_s, 1.0);
        }
        let value = Tensor::new(&[n, o, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        if !self.record {
            cols = Vec::new();
        }
        self.push("conv2d", value, rg, Op::Conv2d { x, w, b, spec, cols })
    }

    /// Non-overlapping `k x k` max pooling (stride `k`).
    pub fn maxpool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 4 || k == 0 || xt.shape()[2] < k || xt.shape()[3] < k {
            return Err(invalid("maxpool", xt, format!("needs [N,C,H,W] with H,W >= {k}")));
        }
        let (n, c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
        let (ho, wo) = (h / k, w / k);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let d = xt.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base + oy * k * w + ox * k;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (oy * k + i) * w + ox * k + j;
                            if d[idx] > best {
                                best = d[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i as u32);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(x);
        self.push("maxpool", value, rg, Op::MaxPool { x, argmax })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 4 || factor == 0 {
            return Err(invalid("upsample_nearest", xt, "needs [N,C,H,W] and factor >= 1"));
        }
        let (n, c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
        let (ho, wo) = (h * factor, w * factor);
        let d = xt.data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                let src = &d[(plane * h + y / factor) * w..][..w];
                let dst = &mut out[(plane * ho + y) * wo..][..wo];
                for (x_, v) in dst.iter_mut().enumerate() {
                    *v = src[x_ / factor];
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(x);
        self.push("upsample_nearest", value, rg, Op::Upsample { x, factor })
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xt.shape(), data)?;
        let rg = self.rg(x);
        self.push(name, value, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        self.unary("scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let last = *xt.shape().last().unwrap_or(&0);
        if last == 0 {
            return Err(invalid("softmax", xt, "empty last axis"));
        }
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(last) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v as f64;
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / z) as f32;
            }
        }
        let value = Tensor::new(xt.shape(), out)?;
        let rg = self.rg(x);
        self.push("softmax", value, rg, Op::Softmax(x))
    }

    /// Fully connected layer: x `[N, in]`, w `[out, in]`, b `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if xt.shape().len() != 2 || wt.shape().len() != 2 || xt.shape()[1] != wt.shape()[1] {
            return Err(mismatch("linear", xt, wt));
        }
        let (n, din, dout) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
        if bt.shape() != [dout] {
            return Err(mismatch("linear bias", wt, bt));
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bt.data());
        }
        gemm(n, din, dout, xt.data(), false, wt.data(), true, &mut out, 1.0);
        let value = Tensor::new(&[n, dout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push("linear", value, rg, Op::Linear { x, w, b })
    }

    /// Concatenates along axis 1 (channels for images, features for vectors).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (sa, sb) = (at.shape(), bt.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat_channels", at, bt));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut out = Vec::with_capacity(at.numel() + bt.numel());
        for s in 0..sa[0] {
            out.extend_from_slice(&at.data()[s * ca..(s + 1) * ca]);
            out.extend_from_slice(&bt.data()[s * cb..(s + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[1] = sa[1] + sb[1];
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("concat_channels", value, rg, Op::Concat { a, b })
    }

    /// Elementwise product of two equally shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(mismatch("hadamard", at, bt));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(at.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("hadamard", value, rg, Op::Hadamard(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(mismatch("add", at, bt));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, rg, Op::Add(a, b))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 4 {
            return Err(invalid("global_avg_pool", xt, "needs [N,C,H,W]"));
        }
        let (n, c) = (xt.shape()[0], xt.shape()[1]);
        let hw = xt.shape()[2] * xt.shape()[3];
        let out = xt
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(x);
        self.push("global_avg_pool", value, rg, Op::GlobalAvgPool(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, rg, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64() as f32;
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = (t.sum_f64() / t.numel().max(1) as f64) as f32;
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let pt = self.value(pred);
        if pt.shape() != target.shape() {
            return Err(mismatch("mse", pt, &target));
        }
        let s: f64 = pt
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t) as f64;
                d * d
            })
            .sum();
        let value = Tensor::scalar((s / pt.numel().max(1) as f64) as f32);
        let rg = self.rg(pred);
        self.push("mse", value, rg, Op::Mse { pred, target })
    }

    /// Mean binary cross-entropy on logits against constant targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape() != target.shape() {
            return Err(mismatch("bce_with_logits", lt, &target));
        }
        let s: f64 = lt
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| {
                let (x, t) = (x as f64, t as f64);
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let value = Tensor::scalar((s / lt.numel().max(1) as f64) as f32);
        let rg = self.rg(logits);
        self.push("bce_with_logits", value, rg, Op::BceWithLogits { logits, target })
    }

    /// Scalar loss computed outside the graph, with its gradient with
    /// respect to `x` supplied by the caller.
    pub fn custom_loss(&mut self, x: Var, loss: f64, grad: Tensor) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape() != grad.shape() {
            return Err(mismatch("custom_loss", xt, &grad));
        }
        if !grad.is_finite() {
            return Err(TensorError::NonFinite { op: "custom_loss" });
        }
        let rg = self.rg(x);
        self.push("custom_loss", Tensor::scalar(loss as f32), rg, Op::Custom { x, grad })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.finished {
            return Err(TensorError::BackwardTwice);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        self.finished = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.inputs.insert(idx, g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::Conv2d { x, w, b, spec, cols } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (n, c, h, wd) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
                    let (o, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
                    let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                    let geom = ConvGeom {
                        c,
                        h,
                        w: wd,
                        kh,
                        kw,
                        ho,
                        wo,
                        stride: spec.stride,
                        pad: spec.pad,
                    };
                    let k = c * kh * kw;
                    let p = ho * wo;
                    let pointwise = geom.is_pointwise();
                    let gd = g.data();
                    let mut dw = vec![0.0f32; o * k];
                    let mut db = vec![0.0f32; o];
                    let mut dx = vec![0.0f32; n * c * h * wd];
                    let mut dcols = vec![0.0f32; k * p];
                    for s in 0..n {
                        let g_s = &gd[s * o * p..(s + 1) * o * p];
                        let col: &[f32] = if pointwise {
                            &xt.data()[s * c * h * wd..(s + 1) * c * h * wd]
                        } else {
                            &cols[s * k * p..(s + 1) * k * p]
                        };
                        gemm(o, p, k, g_s, false, col, true, &mut dw, 1.0);
                        for (oc, row) in g_s.chunks(p).enumerate() {
                            db[oc] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
                        }
                        if self.nodes[x.0].requires_grad {
                            let dx_s = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                            if pointwise {
                                gemm(k, o, p, wt.data(), true, g_s, false, dx_s, 0.0);
                            } else {
                                gemm(k, o, p, wt.data(), true, g_s, false, &mut dcols, 0.0);
                                geom.col2im(&dcols, dx_s);
                            }
                        }
                    }
                    let (x, w, b) = (*x, *w, *b);
                    let xs = xt.shape().to_vec();
                    let ws = wt.shape().to_vec();
                    send(x, Tensor::new(&xs, dx)?, &mut grads)?;
                    send(w, Tensor::new(&ws, dw)?, &mut grads)?;
                    send(b, Tensor::new(&[o], db)?, &mut grads)?;
                }
                Op::MaxPool { x, argmax } => {
                    let xt = self.value(*x);
                    let mut dx = vec![0.0f32; xt.numel()];
                    for (gv, &i) in g.data().iter().zip(argmax) {
                        dx[i as usize] += gv;
                    }
                    let t = Tensor::new(xt.shape(), dx)?;
                    send(*x, t, &mut grads)?;
                }
                Op::Upsample { x, factor } => {
                    let xt = self.value(*x);
                    let (n, c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
                    let (ho, wo) = (h * factor, w * factor);
                    let mut dx = vec![0.0f32; xt.numel()];
                    let gd = g.data();
                    for plane in 0..n * c {
                        for y in 0..ho {
                            let src = &gd[(plane * ho + y) * wo..][..wo];
                            let dst = &mut dx[(plane * h + y / factor) * w..][..w];
                            for (x_, v) in src.iter().enumerate() {
                                dst[x_ / factor] += v;
                            }
                        }
                    }
                    let t = Tensor::new(xt.shape(), dx)?;
                    send(*x, t, &mut grads)?;
                }
                Op::Relu(x) => {
                    let xt = self.value(*x);
                    let d = xt
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    let t = Tensor::new(xt.shape(), d)?;
                    send(*x, t, &mut grads)?;
                }
                Op::Sigmoid(x) => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect();
                    let t = Tensor::new(node.value.shape(), d)?;
                    send(*x, t, &mut grads)?;
                }
                Op::Scale(x, f) => {
                    let d = g.data().iter().map(|&gv| gv * f).collect();
                    let t = Tensor::new(g.shape(), d)?;
                    send(*x, t, &mut grads)?;
                }
                Op::Softmax(x) => {
                    let last = *node.value.shape().last().unwrap();
                    let mut d = vec![0.0f32; g.numel()];
                    for ((y, gr), dr) in node
                        .value
                        .data()
                        .chunks(last)
                        .zip(g.data().chunks(last))
                        .zip(d.chunks_mut(last))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        for i in 0..last {
                            dr[i] = (y[i] as f64 * (gr[i] as f64 - dot)) as f32;
                        }
                    }
                    let t = Tensor::new(node.value.shape(), d)?;
                    send(*x, t, &mut grads)?;
                }
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (n, din, dout) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
                    let gd = g.data();
                    let mut dx = vec![0.0f32; n * din];
                    gemm(n, dout, din, gd, false, wt.data(), false, &mut dx, 0.0);
                    let mut dw = vec![0.0f32; dout * din];
                    gemm(dout, n, din, gd, true, xt.data(), false, &mut dw, 0.0);
                    let mut db = vec![0.0f64; dout];
                    for row in gd.chunks(dout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v as f64;
                        }
                    }
                    let db = db.into_iter().map(|v| v as f32).collect();
                    let (x, w, b) = (*x, *w, *b);
                    let xs = xt.shape().to_vec();
                    send(x, Tensor::new(&xs, dx)?, &mut grads)?;
                    send(w, Tensor::new(&[dout, din], dw)?, &mut grads)?;
                    send(b, Tensor::new(&[dout], db)?, &mut grads)?;
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                    let inner: usize = sa[2..].iter().product();
                    let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                    let mut da = Vec::with_capacity(sa[0] * ca);
                    let mut dbv = Vec::with_capacity(sb[0] * cb);
                    for chunk in g.data().chunks(ca + cb) {
                        da.extend_from_slice(&chunk[..ca]);
                        dbv.extend_from_slice(&chunk[ca..]);
                    }
                    let (a, b) = (*a, *b);
                    send(a, Tensor::new(&sa, da)?, &mut grads)?;
                    send(b, Tensor::new(&sb, dbv)?, &mut grads)?;
                }
                Op::Hadamard(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
                    let dbv = g.data().iter().zip(at.data()).map(|(x, y)| x * y).collect();
                    let (a, b) = (*a, *b);
                    let s = g.shape().to_vec();
                    send(a, Tensor::new(&s, da)?, &mut grads)?;
                    send(b, Tensor::new(&s, dbv)?, &mut grads)?;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    send(a, g.clone(), &mut grads)?;
                    send(b, g, &mut grads)?;
                }
                Op::GlobalAvgPool(x) => {
                    let xt = self.value(*x);
                    let hw = xt.shape()[2] * xt.shape()[3];
                    let mut d = Vec::with_capacity(xt.numel());
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv / hw as f32, hw));
                    }
                    let t = Tensor::new(xt.shape(), d)?;
                    send(*x, t, &mut grads)?;
                }
                Op::Reshape(x) => {
                    let s = self.shape(*x).to_vec();
                    let t = g.reshape(&s)?;
                    send(*x, t, &mut grads)?;
                }
                Op::Sum(x) => {
                    let s = self.shape(*x).to_vec();
                    send(*x, Tensor::full(&s, g.item()), &mut grads)?;
                }
                Op::Mean(x) => {
                    let s = self.shape(*x).to_vec();
                    let n = self.value(*x).numel().max(1) as f32;
                    send(*x, Tensor::full(&s, g.item() / n), &mut grads)?;
                }
                Op::Mse { pred, target } => {
                    let pt = self.value(*pred);
                    let scale = 2.0 * g.item() as f64 / pt.numel().max(1) as f64;
                    let d = pt
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| ((p - t) as f64 * scale) as f32)
                        .collect();
                    let t = Tensor::new(pt.shape(), d)?;
                    send(*pred, t, &mut grads)?;
                }
                Op::BceWithLogits { logits, target } => {
                    let lt = self.value(*logits);
                    let scale = g.item() / lt.numel().max(1) as f32;
                    let d = lt
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &t)| (sigmoid(x) - t) * scale)
                        .collect();
                    let t = Tensor::new(lt.shape(), d)?;
                    send(*logits, t, &mut grads)?;
                }
                Op::Custom { x, grad } => {
                    let mut t = grad.clone();
                    t.scale(g.item());
                    send(*x, t, &mut grads)?;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_identity_and_annihilator() {
        let mut g = Graph::new();
        let a = g.input(Tensor::ones(&[1, 2, 2])).unwrap();
        let b = g.input(Tensor::ones(&[1, 2, 2])).unwrap();
        let z = g.input(Tensor::zeros(&[1, 2, 2])).unwrap();
        let ab = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(ab), &Tensor::ones(&[1, 2, 2]));
        let az = g.hadamard(a, z).unwrap();
        assert_eq!(g.value(az), &Tensor::zeros(&[1, 2, 2]));
    }

    #[test]
    fn hadamard_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::ones(&[1, 2, 2])).unwrap();
        let b = g.input(Tensor::ones(&[1, 2, 3])).unwrap();
        let err = g.hadamard(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 2]") && err.contains("[1, 2, 3]"), "{err}");
    }

    #[test]
    fn conv_of_ones_counts_kernel_overlap() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 1, 4, 4])).unwrap();
        let w = g.input(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, w, b, Conv2dSpec { stride: 1, pad: 1 }).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 1, 4, 4]);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[5], 9.0);
        assert_eq!(v.data()[3], 4.0);
        assert_eq!(v.data()[1], 6.0);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input_with_grad(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let sq = g.hadamard(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_hadamard_is_the_other_factor() {
        let mut g = Graph::new();
        let a = g.input_with_grad(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let b = g.input_with_grad(t(&[3], &[4.0, 3.0, -1.0])).unwrap();
        let p = g.hadamard(a, b).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.input(a).unwrap().data(), &[4.0, 3.0, -1.0]);
        assert_eq!(grads.input(b).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input_with_grad(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
        let c = g.input(t(&[1], &[1.0])).unwrap();
        assert!(matches!(g.backward(c), Err(TensorError::Detached)));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn inference_graph_is_detached() {
        let mut g = Graph::inference();
        let x = g.input_with_grad(t(&[2], &[1.0, 2.0])).unwrap();
        let l = g.sum(x).unwrap();
        assert!(matches!(g.backward(l), Err(TensorError::Detached)));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[f32::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn shape_formulas() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3, 9, 7])).unwrap();
        let w = g.input(Tensor::zeros(&[5, 3, 3, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[5])).unwrap();
        let y = g.conv2d(x, w, b, Conv2dSpec { stride: 2, pad: 1 }).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 5, 4]);
        let p = g.maxpool(y, 2).unwrap();
        assert_eq!(g.shape(p), &[2, 5, 2, 2]);
        let u = g.upsample_nearest(p, 3).unwrap();
        assert_eq!(g.shape(u), &[2, 5, 6, 6]);
        let c = g.concat_channels(u, u).unwrap();
        assert_eq!(g.shape(c), &[2, 10, 6, 6]);
        let gp = g.global_avg_pool(c).unwrap();
        assert_eq!(g.shape(gp), &[2, 10]);
    }
}
