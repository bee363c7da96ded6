//! Reverse-mode differentiation over a linear trace.
//!
//! Every traced op appends a node holding its output and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse, summing
//! gradient contributions over fan-out, and stores the final gradient in each
//! node tensor that requires one.

use serde::{Deserialize, Serialize};

use super::kernels::{self, Window2d};
use super::tensor::numel;
use super::{nan_check_enabled, Element, Tensor};
use crate::error::{CctError, Result, StagePhase};
use crate::rng::RngStream;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// GELU flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluForm {
    /// `x·Φ(x)` with the exact error function.
    #[default]
    Exact,
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    Tanh,
}

const GELU_TANH_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_value(x: f64, form: GeluForm) -> f64 {
    match form {
        GeluForm::Exact => x * 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
        GeluForm::Tanh => {
            let u = GELU_TANH_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
    }
}

fn gelu_slope(x: f64, form: GeluForm) -> f64 {
    match form {
        GeluForm::Exact => {
            let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
            cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
        }
        GeluForm::Tanh => {
            let u = GELU_TANH_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_TANH_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
    }
}

/// Output extent of a conv/pool window sweep: `floor((in + 2p − k)/s) + 1`,
/// or `None` when the padded input is shorter than the kernel.
pub fn window_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    PrependToken { x: Var, token: Var },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: Window2d, batch: usize, out_channels: usize },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Gelu(Var, GeluForm),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::PrependToken { .. } => "prepend_token",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A computation trace. Single-threaded; build one per independent forward.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f64> {
    nodes: Vec<Node<T>>,
}

/// For each flat output index of `permute(shape, axes)`, the flat input index.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop the whole trace.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Record an input. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        if nan_check_enabled() {
            assert!(data.iter().all(|v| v.is_finite()), "non-finite value produced by {}", op.name());
        }
        let value = Tensor::from_parts(shape, data).with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CctError::Dimension { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(CctError::Dimension { op: "add_broadcast", lhs: xs.to_vec(), rhs: ys.to_vec() });
        }
        let yd = self.data(y);
        let block = yd.len().max(1);
        let data = self.data(x).chunks(block).flat_map(|c| c.iter().zip(yd).map(|(&a, &b)| a + b)).collect();
        Ok(self.push(xs.to_vec(), data, Op::AddBroadcast(x, y), &[x, y]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let data = self.data(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c), &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push(Vec::new(), vec![total], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(CctError::Dimension { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape.to_vec() });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len() && axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(CctError::Dimension { op: "permute", lhs: shape, rhs: axes.to_vec() });
        }
        let map = permute_map(&shape, axes);
        let src = self.data(x);
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.push(out_shape, data, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(CctError::Dimension { op: "narrow", lhs: shape, rhs: vec![axis, start, len] });
        }
        let (outer, full, inner) = axis_layout(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, data, Op::Narrow { x, axis, start }, &[x]))
    }

    /// `[N×n×d]` tokens with `token [d]` inserted at position 0 of every row.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || self.shape(token) != [shape[2]] {
            return Err(CctError::Dimension { op: "prepend_token", lhs: shape, rhs: self.shape(token).to_vec() });
        }
        let (batch, n, d) = (shape[0], shape[1], shape[2]);
        let (src, tok) = (self.data(x), self.data(token));
        let mut data = Vec::with_capacity(batch * (n + 1) * d);
        for b in 0..batch {
            data.extend_from_slice(tok);
            data.extend_from_slice(&src[b * n * d..(b + 1) * n * d]);
        }
        Ok(self.push(vec![batch, n + 1, d], data, Op::PrependToken { x, token }, &[x, token]))
    }

    /// Matrix product over the last two axes. `a` is `[..., m, k]`; `b` is
    /// either `[k, n]` (shared across the batch) or `[..., k, n]` with the same
    /// leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || CctError::Dimension { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let b_batched = sb.len() > 2;
        if kb != k || (b_batched && sb[..sb.len() - 2] != *lead) {
            return Err(err());
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        if b_batched {
            for i in 0..batch {
                kernels::gemm_acc(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            kernels::gemm_acc(ad, bd, &mut out, batch * m, k, n);
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, b_batched }, &[a, b]))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    fn window(&self, input: Var, kernel: usize, stride: usize, padding: usize, phase: StagePhase) -> Result<(usize, Window2d)> {
        let shape = self.shape(input);
        if shape.len() != 4 {
            return Err(CctError::Dimension {
                op: if phase == StagePhase::Conv { "conv2d" } else { "maxpool2d" },
                lhs: shape.to_vec(),
                rhs: vec![kernel, kernel],
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let extent = |len: usize, axis: &str| {
            window_output_extent(len, kernel, stride, padding).ok_or_else(|| CctError::TokenizerGeometry {
                stage: None,
                phase,
                detail: format!(
                    "{axis} extent {len} + 2*{padding} padding = {} is smaller than kernel {kernel} (stride {stride})",
                    len + 2 * padding
                ),
            })
        };
        let out_h = extent(h, "height")?;
        let out_w = extent(w, "width")?;
        Ok((n, Window2d { channels: c, in_h: h, in_w: w, kernel, stride, padding, out_h, out_w }))
    }

    /// Cross-correlation of `[N×C×H×W]` input with an `[O×C×k×k]` kernel and
    /// zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let is = self.shape(input).to_vec();
        if ks.len() != 4 || is.len() != 4 || ks[1] != is[1] || ks[2] != ks[3] {
            return Err(CctError::Dimension { op: "conv2d", lhs: is, rhs: ks });
        }
        let out_channels = ks[0];
        if let Some(b) = bias {
            if self.shape(b) != [out_channels] {
                return Err(CctError::Dimension { op: "conv2d bias", lhs: ks, rhs: self.shape(b).to_vec() });
            }
        }
        let (batch, geom) = self.window(input, ks[2], stride, padding, StagePhase::Conv)?;
        let q = geom.channels * geom.kernel * geom.kernel;
        let p = geom.out_h * geom.out_w;
        let in_len = geom.channels * geom.in_h * geom.in_w;
        let mut out = vec![T::zero(); batch * out_channels * p];
        let mut cols = vec![T::zero(); q * p];
        let (src, w) = (self.data(input), self.data(kernel));
        for b in 0..batch {
            kernels::im2col(&src[b * in_len..(b + 1) * in_len], &geom, &mut cols);
            let dst = &mut out[b * out_channels * p..(b + 1) * out_channels * p];
            if let Some(bias) = bias {
                for (o, &bv) in self.data(bias).iter().enumerate() {
                    dst[o * p..(o + 1) * p].fill(bv);
                }
            }
            kernels::gemm_acc(w, &cols, dst, out_channels, q, p);
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            vec![batch, out_channels, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { input, kernel, bias, geom, batch, out_channels },
            &inputs,
        ))
    }

    /// Windowed maximum; padding positions never win. Padding above `k/2`
    /// is rejected because a window could then see only padding.
    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        if 2 * padding > kernel {
            return Err(CctError::Parameter(format!("maxpool padding {padding} exceeds half the kernel size {kernel}")));
        }
        let (batch, geom) = self.window(input, kernel, stride, padding, StagePhase::Pool)?;
        let in_len = geom.channels * geom.in_h * geom.in_w;
        let out_len = geom.channels * geom.out_h * geom.out_w;
        let mut out = vec![T::zero(); batch * out_len];
        let mut argmax = vec![0usize; batch * out_len];
        let src = self.data(input);
        for b in 0..batch {
            kernels::maxpool(
                &src[b * in_len..(b + 1) * in_len],
                &geom,
                &mut out[b * out_len..(b + 1) * out_len],
                &mut argmax[b * out_len..(b + 1) * out_len],
            );
            argmax[b * out_len..(b + 1) * out_len].iter_mut().for_each(|i| *i += b * in_len);
        }
        Ok(self.push(vec![batch, geom.channels, geom.out_h, geom.out_w], out, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var, form: GeluForm) -> Var {
        let data = self.data(x).iter().map(|&v| T::from_f64(gelu_value(v.as_f64(), form))).collect();
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x, form), &[x])
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(CctError::Dimension { op: "softmax", lhs: shape, rhs: vec![axis] });
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalize each row of the last axis to zero mean and unit variance,
    /// then apply `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(CctError::Dimension { op: "layer_norm", lhs: shape, rhs: self.shape(gamma).to_vec() });
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let (src, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Inverted dropout. Identity (no new node) when not training or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CctError::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel()).map(|_| if rng.uniform() < rate { T::zero() } else { keep }).collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean negative log-softmax of the labelled category over `[N×C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(CctError::Dimension { op: "cross_entropy", lhs: shape, rhs: vec![labels.len()] });
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(CctError::Data(format!("label {bad} at position {i} is outside [0, {c})")));
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += (lse - row[labels[i]]).as_f64();
        }
        let loss = T::from_f64(total / n as f64);
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Accumulate gradients of a scalar `loss` into every node that requires
    /// them. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CctError::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Gradient buffer for `v`, created zeroed on first use; None when `v`
        // does not require grad.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.requires_grad(v) {
                    let len = self.value(v).numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = slot!(v) {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddBroadcast(x, y) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if let Some(gy) = slot!(*y) {
                    let block = gy.len().max(1);
                    for chunk in g.chunks(block) {
                        gy.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Permute { x, axes } => {
                let map = permute_map(self.shape(*x), axes);
                if let Some(gx) = slot!(*x) {
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_layout(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::PrependToken { x, token } => {
                let s = self.shape(*x);
                let (batch, n, d) = (s[0], s[1], s[2]);
                if let Some(gx) = slot!(*x) {
                    for b in 0..batch {
                        let src = &g[(b * (n + 1) + 1) * d..(b + 1) * (n + 1) * d];
                        gx[b * n * d..(b + 1) * n * d].iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                    }
                }
                if let Some(gt) = slot!(*token) {
                    for b in 0..batch {
                        let src = &g[b * (n + 1) * d..(b * (n + 1) + 1) * d];
                        gt.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n, b_batched } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let (av, bv) = (self.data(a), self.data(b));
                if *b_batched {
                    if let Some(ga) = slot!(a) {
                        for i in 0..batch {
                            kernels::gemm_nt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    if let Some(gb) = slot!(b) {
                        for i in 0..batch {
                            kernels::gemm_tn_acc(
                                &av[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                } else {
                    if let Some(ga) = slot!(a) {
                        kernels::gemm_nt_acc(g, bv, ga, batch * m, n, k);
                    }
                    if let Some(gb) = slot!(b) {
                        kernels::gemm_tn_acc(av, g, gb, batch * m, k, n);
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, geom, batch, out_channels } => {
                let (oc, batch) = (*out_channels, *batch);
                let q = geom.channels * geom.kernel * geom.kernel;
                let p = geom.out_h * geom.out_w;
                let in_len = geom.channels * geom.in_h * geom.in_w;
                if let Some(b) = bias {
                    if let Some(gb) = slot!(*b) {
                        for bi in 0..batch {
                            for o in 0..oc {
                                let base = (bi * oc + o) * p;
                                gb[o] += g[base..base + p].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let src = self.data(*input);
                let w = self.data(*kernel);
                let mut cols = vec![T::zero(); q * p];
                if self.requires_grad(*kernel) {
                    let mut gw_local = vec![T::zero(); oc * q];
                    for bi in 0..batch {
                        kernels::im2col(&src[bi * in_len..(bi + 1) * in_len], geom, &mut cols);
                        kernels::gemm_nt_acc(&g[bi * oc * p..(bi + 1) * oc * p], &cols, &mut gw_local, oc, p, q);
                    }
                    if let Some(gw) = slot!(*kernel) {
                        gw.iter_mut().zip(&gw_local).for_each(|(a, &b)| *a += b);
                    }
                }
                if let Some(gi) = slot!(*input) {
                    for bi in 0..batch {
                        cols.fill(T::zero());
                        kernels::gemm_tn_acc(w, &g[bi * oc * p..(bi + 1) * oc * p], &mut cols, oc, q, p);
                        kernels::col2im_acc(&cols, geom, &mut gi[bi * in_len..(bi + 1) * in_len]);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(gi) = slot!(*input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += g[o];
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(gx) = slot!(*x) {
                    for j in 0..g.len() {
                        if xv[j] > T::zero() {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            Op::Gelu(x, form) => {
                let xv = self.data(*x);
                if let Some(gx) = slot!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * T::from_f64(gelu_slope(xv[j].as_f64(), *form));
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.data(*gamma);
                let d = gv.len();
                let rows = g.len() / d;
                if let Some(gg) = slot!(*gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let dt = T::from_f64(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * d + j];
                        }
                        let scale = rstd[r] / dt;
                        for j in 0..d {
                            gx[r * d + j] += scale * (dt * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * mask[j];
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / T::from_f64(n as f64);
                if let Some(gl) = slot!(*logits) {
                    for i in 0..n {
                        for j in 0..c {
                            let target = if j == labels[i] { T::one() } else { T::zero() };
                            gl[i * c + j] += scale * (probs[i * c + j] - target);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(CctError::Usage(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(CctError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        assert_eq!(tape.value(y).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.data(z), tape.data(x));
    }

    #[test]
    fn narrow_and_prepend() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let y = tape.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(tape.data(y), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let tok = tape.constant(t(&[2], &[-1.0, -2.0]));
        let z = tape.prepend_token(x, tok).unwrap();
        assert_eq!(tape.shape(z), &[2, 4, 2]);
        assert_eq!(&tape.data(z)[..4], &[-1.0, -2.0, 0.0, 1.0]);
        assert_eq!(&tape.data(z)[8..10], &[-1.0, -2.0]);
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[4]));
        let mut rng = RngStream::new(0);
        assert!(matches!(tape.dropout(x, 1.0, &mut rng, true), Err(CctError::Parameter(_))));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(tape.cross_entropy(x, &[2]), Err(CctError::Data(_))));
    }
}
