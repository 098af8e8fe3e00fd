//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only record of executed operations. Every op
//! pushes one node whose inputs were pushed earlier, so node order is a
//! topological order and [`Graph::backward`] simply walks it in reverse.
//! Gradients accumulate with `+=`, which is what lets one backbone output
//! feed several descriptor branches.
//!
//! ```
//! use cgd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = g.pow(x, 2.0).unwrap();
//! let loss = g.sum_all(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{CgdError, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Pow(Var, f64),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    MaxReduce {
        input: Var,
        argmax: Vec<usize>,
        axis: usize,
    },
    SumReduce(Var, usize),
    MeanReduce(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    L2Normalize {
        input: Var,
        axis: usize,
        eps: f64,
    },
    AddBias(Var, Var),
    GatherRows(Var, Vec<usize>),
    RowDistance(Var, Var),
    LogSoftmax(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// The computation record.
///
/// Confined to a single thread; build a fresh one per training step.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output positions `o` for which `o * stride + k - padding` lands inside `0..in_len`.
fn valid_range(k: usize, padding: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - padding <= in_len - 1
    let limit = in_len + padding;
    let hi = if limit > k {
        ((limit - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every gradient so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CgdError::Shape(format!(
                "{what}: operand shapes differ, {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_axis(&self, v: Var, axis: usize, what: &str) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(CgdError::Shape(format!(
                "{what}: axis {axis} out of range for shape {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    /// Cross-correlation of an NCHW input with an OIKK weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(CgdError::Shape(format!(
                "conv2d expects 4-D input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(CgdError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != ci {
            return Err(CgdError::Shape(format!(
                "conv2d: input has {c} channels but weight expects {ci} (input {xs:?}, weight {ws:?})"
            )));
        }
        let (oh, ow) = match (conv_out_len(h, kh, stride, padding), conv_out_len(w, kw, stride, padding)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(CgdError::Shape(format!(
                    "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"
                )))
            }
        };
        let geo = ConvGeometry { c, h, w, kh, kw, stride, padding, oh, ow };
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let plane = oh * ow;
        let mut out = Vec::with_capacity(n * o * plane);
        let mut col = vec![0.0; geo.col_len()];
        for b in 0..n {
            geo.im2col(&x[b * c * h * w..(b + 1) * c * h * w], &mut col);
            out.extend(matmul_raw(wt, &col, o, c * kh * kw, plane));
        }
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        Ok(self.push_op(
            value,
            &[input, weight],
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(value, &[a], Op::Relu(a))
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CgdError::Shape(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(value, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(CgdError::Shape(format!("transpose expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(&[c, r], transpose_raw(self.value(a).data(), r, c))?;
        Ok(self.push_op(value, &[a], Op::Transpose(a)))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push_op(value, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push_op(value, &[a], Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push_op(value, &[a], Op::Scale(a, c))
    }

    /// Elementwise `a^exponent`. Non-integer exponents need a nonnegative base.
    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        if exponent.fract() != 0.0 && self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(CgdError::InvalidArgument(format!(
                "pow: negative base with non-integer exponent {exponent}"
            )));
        }
        let value = self.value(a).map(|x| x.powf(exponent));
        Ok(self.push_op(value, &[a], Op::Pow(a, exponent)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push_op(value, &[a], Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push_op(value, &[a], Op::Log(a))
    }

    /// Elementwise `max(a, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let value = self.value(a).map(|x| x.max(lo));
        self.push_op(value, &[a], Op::ClampMin(a, lo))
    }

    /// Maximum along `axis` (removed). Gradient flows to the first maximal entry.
    pub fn max_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "max_reduce")?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = x[o * len * inner + i];
                for k in 1..len {
                    let v = x[(o * len + k) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let value = Tensor::new(&reduced_shape(&shape, axis), out)?;
        Ok(self.push_op(value, &[a], Op::MaxReduce { input: a, argmax, axis }))
    }

    pub fn sum_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "sum_reduce")?;
        let value = self.reduce_sum_value(a, axis, 1.0)?;
        Ok(self.push_op(value, &[a], Op::SumReduce(a, axis)))
    }

    pub fn mean_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "mean_reduce")?;
        let len = self.shape(a)[axis];
        let value = self.reduce_sum_value(a, axis, 1.0 / len as f64)?;
        Ok(self.push_op(value, &[a], Op::MeanReduce(a, axis)))
    }

    fn reduce_sum_value(&self, a: Var, axis: usize, factor: f64) -> Result<Tensor> {
        let shape = self.shape(a);
        let (outer, len, inner) = split_axis(shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if factor != 1.0 {
            out.iter_mut().for_each(|v| *v *= factor);
        }
        Tensor::new(&reduced_shape(shape, axis), out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), &[a], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Tensor::scalar(s), &[a], Op::MeanAll(a))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| CgdError::InvalidArgument("concat of zero tensors".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(CgdError::Shape(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push_op(value, parts, Op::Concat(parts.to_vec(), axis)))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis, "narrow")?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(CgdError::Shape(format!(
                "narrow: range {start}..{} out of bounds for extent {} on axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.push_op(value, &[a], Op::Narrow { input: a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push_op(value, &[a], Op::Reshape(a)))
    }

    /// `v / max(||v||_2, eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(a, axis, "l2_normalize")?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let norm = (0..len).map(|k| x[idx(k)] * x[idx(k)]).sum::<f64>().sqrt();
                let denom = norm.max(eps);
                for k in 0..len {
                    out[idx(k)] = x[idx(k)] / denom;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push_op(value, &[a], Op::L2Normalize { input: a, axis, eps }))
    }

    /// Adds a per-channel bias: `a` is `[N, C, ...]`, `bias` is `[C]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() < 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(CgdError::Shape(format!(
                "add_bias: bias {sb:?} does not match channel axis of {sa:?}"
            )));
        }
        let (outer, len, inner) = split_axis(sa, 1);
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for (k, &bk) in b.iter().enumerate().take(len) {
                let base = (o * len + k) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bk);
            }
        }
        let value = Tensor::new(sa, out)?;
        Ok(self.push_op(value, &[a, bias], Op::AddBias(a, bias)))
    }

    /// Selects rows of a 2-D tensor; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(CgdError::Shape(format!("gather_rows expects 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(CgdError::Shape(format!("gather_rows: index {bad} >= {rows} rows")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(&[indices.len(), cols], out)?;
        Ok(self.push_op(value, &[a], Op::GatherRows(a, indices.to_vec())))
    }

    /// Euclidean distance between matching rows: `[N,D], [N,D] -> [N]`.
    ///
    /// The subgradient at zero distance is taken as zero.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_distance")?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(CgdError::Shape(format!("row_distance expects 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| {
                        let d = x[r * cols + c] - y[r * cols + c];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(&[rows], out)?;
        Ok(self.push_op(value, &[a, b], Op::RowDistance(a, b)))
    }

    /// Numerically stable log-softmax over the last axis of a 2-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(CgdError::Shape(format!("log_softmax expects 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        let value = Tensor::new(&[rows, cols], out)?;
        Ok(self.push_op(value, &[a], Op::LogSoftmax(a)))
    }

    /// Back-propagates from a one-element `loss`, accumulating into every
    /// gradient-tracking ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(CgdError::Graph(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(CgdError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_done = true;
        let seed = Tensor::ones(lv.shape());
        self.accumulate(loss, seed);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            for (v, gi) in self.input_grads(idx, &g) {
                self.accumulate(v, gi);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (gx, gw) = conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    *stride,
                    *padding,
                    self.tracked(*input),
                    self.tracked(*weight),
                );
                if let Some(gx) = gx {
                    res.push((*input, gx));
                }
                if let Some(gw) = gw {
                    res.push((*weight, gw));
                }
            }
            Op::Relu(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                    .collect();
                res.push((*a, like(val(*a), d)));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.tracked(*a) {
                    let bt = transpose_raw(val(*b).data(), k, n);
                    res.push((*a, like(val(*a), matmul_raw(g.data(), &bt, m, n, k))));
                }
                if self.tracked(*b) {
                    let at = transpose_raw(val(*a).data(), m, k);
                    res.push((*b, like(val(*b), matmul_raw(&at, g.data(), k, m, n))));
                }
            }
            Op::Transpose(a) => {
                let s = out.shape();
                res.push((*a, like(val(*a), transpose_raw(g.data(), s[0], s[1]))));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if self.tracked(*a) {
                    res.push((*a, like(g, zip_map(g.data(), y, |gi, yi| gi * yi))));
                }
                if self.tracked(*b) {
                    res.push((*b, like(g, zip_map(g.data(), x, |gi, xi| gi * xi))));
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if self.tracked(*a) {
                    res.push((*a, like(g, zip_map(g.data(), y, |gi, yi| gi / yi))));
                }
                if self.tracked(*b) {
                    let d = (0..y.len()).map(|i| -g.data()[i] * x[i] / (y[i] * y[i])).collect();
                    res.push((*b, like(g, d)));
                }
            }
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Scale(a, c) => res.push((*a, g.map(|x| x * c))),
            Op::Pow(a, e) => {
                let e = *e;
                let d = zip_map(val(*a).data(), g.data(), |x, gy| {
                    if x == 0.0 && e < 1.0 {
                        // derivative diverges or is undefined at the origin
                        0.0
                    } else if e == 0.0 {
                        0.0
                    } else {
                        gy * e * x.powf(e - 1.0)
                    }
                });
                res.push((*a, like(g, d)));
            }
            Op::Exp(a) => res.push((*a, like(g, zip_map(out.data(), g.data(), |y, gy| y * gy)))),
            Op::Log(a) => res.push((*a, like(g, zip_map(val(*a).data(), g.data(), |x, gy| gy / x)))),
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                let d = zip_map(val(*a).data(), g.data(), |x, gy| if x > lo { gy } else { 0.0 });
                res.push((*a, like(g, d)));
            }
            Op::MaxReduce { input, argmax, axis } => {
                let shape = val(*input).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = o * inner + i;
                        d[(o * len + argmax[j]) * inner + i] += g.data()[j];
                    }
                }
                res.push((*input, like(val(*input), d)));
            }
            Op::SumReduce(a, axis) | Op::MeanReduce(a, axis) => {
                let shape = val(*a).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let factor = match &node.op {
                    Op::MeanReduce(..) => 1.0 / len as f64,
                    _ => 1.0,
                };
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            d[(o * len + k) * inner + i] = g.data()[o * inner + i] * factor;
                        }
                    }
                }
                res.push((*a, like(val(*a), d)));
            }
            Op::SumAll(a) => res.push((*a, Tensor::full(val(*a).shape(), g.data()[0]))),
            Op::MeanAll(a) => {
                let n = val(*a).numel() as f64;
                res.push((*a, Tensor::full(val(*a).shape(), g.data()[0] / n)));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if self.tracked(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        res.push((p, like(val(p), d)));
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, full, inner) = split_axis(val(*input).shape(), *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*input, like(val(*input), d)));
            }
            Op::Reshape(a) => res.push((*a, like(val(*a), g.data().to_vec()))),
            Op::L2Normalize { input, axis, eps } => {
                let x = val(*input).data();
                let y = out.data();
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let mut d = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let norm = (0..len).map(|k| x[idx(k)] * x[idx(k)]).sum::<f64>().sqrt();
                        if norm > *eps {
                            let dot: f64 = (0..len).map(|k| y[idx(k)] * g.data()[idx(k)]).sum();
                            for k in 0..len {
                                d[idx(k)] = (g.data()[idx(k)] - y[idx(k)] * dot) / norm;
                            }
                        } else {
                            for k in 0..len {
                                d[idx(k)] = g.data()[idx(k)] / eps;
                            }
                        }
                    }
                }
                res.push((*input, like(val(*input), d)));
            }
            Op::AddBias(a, bias) => {
                res.push((*a, g.clone()));
                if self.tracked(*bias) {
                    let (outer, len, inner) = split_axis(out.shape(), 1);
                    let mut d = vec![0.0; len];
                    for o in 0..outer {
                        for (k, dk) in d.iter_mut().enumerate() {
                            let base = (o * len + k) * inner;
                            *dk += g.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    res.push((*bias, like(val(*bias), d)));
                }
            }
            Op::GatherRows(a, indices) => {
                let cols = out.shape()[1];
                let mut d = vec![0.0; val(*a).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g.data()[r * cols + c];
                    }
                }
                res.push((*a, like(val(*a), d)));
            }
            Op::RowDistance(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let cols = val(*a).shape()[1];
                let mut da = vec![0.0; x.len()];
                for (r, (&dist, &gr)) in out.data().iter().zip(g.data()).enumerate() {
                    if dist == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        let j = r * cols + c;
                        da[j] = gr * (x[j] - y[j]) / dist;
                    }
                }
                let db = da.iter().map(|v| -v).collect();
                res.push((*a, like(val(*a), da)));
                res.push((*b, like(val(*b), db)));
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gs: f64 = g.data()[r * cols..(r + 1) * cols].iter().sum();
                    for c in 0..cols {
                        let j = r * cols + c;
                        d[j] = g.data()[j] - y[j].exp() * gs;
                    }
                }
                res.push((*a, like(val(*a), d)));
            }
        }
        res
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape(), data).expect("gradient shape matches its input")
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    const TR: usize = 4;
    const TC: usize = 8;
    let mut out = vec![0.0; m * n];
    for i0 in (0..m).step_by(TR) {
        let rows = TR.min(m - i0);
        for j0 in (0..n).step_by(TC) {
            let cols = TC.min(n - j0);
            if rows == TR && cols == TC {
                let mut acc = [[0.0f64; TC]; TR];
                for p in 0..k {
                    let b_row: &[f64; TC] = b[p * n + j0..p * n + j0 + TC].try_into().expect("tile width");
                    for (r, acc_row) in acc.iter_mut().enumerate() {
                        let av = a[(i0 + r) * k + p];
                        for (o, &bv) in acc_row.iter_mut().zip(b_row) {
                            *o += av * bv;
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate() {
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TC].copy_from_slice(acc_row);
                }
            } else {
                for i in i0..i0 + rows {
                    for j in j0..j0 + cols {
                        let mut acc = 0.0;
                        for p in 0..k {
                            acc += a[i * k + p] * b[p * n + j];
                        }
                        out[i * n + j] = acc;
                    }
                }
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Shape bookkeeping for lowering a convolution to a matrix product.
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn col_len(&self) -> usize {
        self.c * self.kh * self.kw * self.oh * self.ow
    }

    /// Unfolds one `C x H x W` image into a `(C*kh*kw) x (oh*ow)` matrix; padding reads as zero.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let plane = self.oh * self.ow;
        col.fill(0.0);
        for ic in 0..self.c {
            let src = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y_lo, y_hi) = valid_range(ky, self.padding, self.stride, self.h, self.oh);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = valid_range(kx, self.padding, self.stride, self.w, self.ow);
                    let row = ((ic * self.kh + ky) * self.kw + kx) * plane;
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let dst = &mut col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let src_row = &src[iy * self.w..(iy + 1) * self.w];
                        for ox in x_lo..x_hi {
                            dst[ox] = src_row[ox * self.stride + kx - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters columns back, accumulating.
    fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let plane = self.oh * self.ow;
        for ic in 0..self.c {
            let dst = &mut gx[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y_lo, y_hi) = valid_range(ky, self.padding, self.stride, self.h, self.oh);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = valid_range(kx, self.padding, self.stride, self.w, self.ow);
                    let row = ((ic * self.kh + ky) * self.kw + kx) * plane;
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let src = &col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let dst_row = &mut dst[iy * self.w..(iy + 1) * self.w];
                        for ox in x_lo..x_hi {
                            dst_row[ox * self.stride + kx - self.padding] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (xs, ws, gs) = (input.shape(), weight.shape(), gout.shape());
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (gs[2], gs[3]);
    let geo = ConvGeometry { c, h, w, kh, kw, stride, padding, oh, ow };
    let (plane, ckk, img) = (oh * ow, c * kh * kw, c * h * w);
    let x = input.data();
    let g = gout.data();
    let wt_t = transpose_raw(weight.data(), o, ckk);
    let mut gx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if want_weight { vec![0.0; weight.numel()] } else { Vec::new() };
    let mut col = vec![0.0; geo.col_len()];
    for b in 0..n {
        let g_b = &g[b * o * plane..(b + 1) * o * plane];
        if want_weight {
            geo.im2col(&x[b * img..(b + 1) * img], &mut col);
            let col_t = transpose_raw(&col, ckk, plane);
            for (acc, v) in gw.iter_mut().zip(matmul_raw(g_b, &col_t, o, plane, ckk)) {
                *acc += v;
            }
        }
        if want_input {
            let gcol = matmul_raw(&wt_t, g_b, ckk, o, plane);
            geo.col2im(&gcol, &mut gx[b * img..(b + 1) * img]);
        }
    }
    (
        want_input.then(|| like(input, gx)),
        want_weight.then(|| like(weight, gw)),
    )
}
