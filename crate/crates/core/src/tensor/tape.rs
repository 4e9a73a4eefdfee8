// Reverse-mode tape.
//
// Every op appends a node holding its forward value. Node ids are assigned in
// recording order, so walking ids downward from the loss is a valid reverse
// topological traversal and each node's backward rule runs at most once.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::params::Gradients;
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Fixed-weight sparse linear map in CSR form: `out[r] = Σ w · in[idx]`.
///
/// Rows are output items, columns index input rows; each row applies to every
/// feature channel alike.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseMap {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f32>,
}

impl SparseMap {
    pub fn new(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    /// Append an output row built from `(input index, weight)` taps.
    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, f32)>) {
        for (i, w) in taps {
            debug_assert!(i < self.cols);
            self.index.push(i as u32);
            self.weight.push(w);
        }
        self.offsets.push(self.index.len());
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let (s, e) = (self.offsets[r], self.offsets[r + 1]);
        self.index[s..e]
            .iter()
            .zip(&self.weight[s..e])
            .map(|(&i, &w)| (i as usize, w))
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.offsets[r + 1] - self.offsets[r]
    }

    /// Apply to a row-major (cols × channels) matrix.
    pub fn apply(&self, x: &[f32], channels: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.rows * channels];
        for r in 0..self.rows {
            let dst = &mut out[r * channels..(r + 1) * channels];
            for (i, w) in self.row(r) {
                let src = &x[i * channels..(i + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Transposed application, accumulating in row order.
    pub fn apply_transpose(&self, g: &[f32], channels: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.cols * channels];
        for r in 0..self.rows {
            let src = &g[r * channels..(r + 1) * channels];
            for (i, w) in self.row(r) {
                let dst = &mut out[i * channels..(i + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    Shift(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f32),
    Sigmoid(Var),
    Abs(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    VarAxis(Var, usize),
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<u32>,
    },
    Softmax(Var, usize),
    Standardize {
        x: Var,
        axis: usize,
        inv_std: Vec<f32>,
    },
    Concat(Vec<Var>, usize),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Sparse(Var, Arc<SparseMap>),
    MaxRelative {
        src: Var,
        query: Arc<Vec<usize>>,
        argmax: Vec<u32>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations and computes gradients in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    buffer_updates: Vec<(String, Tensor)>,
}

const NO_ARGMAX: u32 = u32::MAX;

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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Record a named trainable parameter. Registering the same name twice on one
    /// tape returns the same handle, so gradients from every use accumulate.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t.clone().with_requires_grad(true));
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of a value with its history cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub(crate) fn record_buffer_update(&mut self, name: String, t: Tensor) {
        self.buffer_updates.push((name, t));
    }

    /// Which side of every kink the forward pass took: input signs at ReLU-like
    /// and absolute-value nodes, winners at max nodes. Two passes with equal
    /// signatures evaluated the same smooth piece of the function.
    pub fn branch_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        let signs = |sig: &mut Vec<u32>, t: &Tensor, at: f32| sig.extend(t.data().iter().map(|&v| (v > at) as u32));
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => signs(&mut sig, &self.nodes[x.0].value, 0.0),
                Op::ClampMin(x, m) => signs(&mut sig, &self.nodes[x.0].value, *m),
                Op::Abs(x) => signs(&mut sig, &self.nodes[x.0].value, 0.0),
                Op::MaxAxis { argmax, .. } | Op::MaxRelative { argmax, .. } => sig.extend(argmax),
                _ => {}
            }
        }
        sig
    }

    /// Running-statistics updates recorded during a training-mode forward pass.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape =
            kernels::broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(op_name, &sa, &sb))?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; numel(&out_shape)];
            let st_a = kernels::broadcast_strides(&sa, &out_shape);
            let st_b = kernels::broadcast_strides(&sb, &out_shape);
            kernels::for_each_broadcast(&out_shape, &st_a, &st_b, |o, i, j| {
                out[o] = f(xa[i], xb[j])
            });
            out
        };
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, op(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect())
            .expect("unary op preserves shape");
        self.push(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v + s, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f32::sqrt, Op::Sqrt(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f32) -> Var {
        self.unary(x, |v| v.max(min), Op::ClampMin(x, min))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f32::abs, Op::Abs(x))
    }

    // ---------------------------------------------------------------- linear algebra

    /// (m×k) · (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[2]));
        }
        let data = transpose2(self.value(x).data(), s[0], s[1]);
        let t = Tensor::new(&[s[1], s[0]], data)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.numel().max(1) as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(x), &[x])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s[axis] = 1;
        s
    }

    fn axis_stats(&self, x: Var, axis: usize) -> (Vec<f64>, Vec<f64>) {
        let t = self.value(x);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let d = t.data();
        let mut mean = vec![0f64; outer * inner];
        let mut var = vec![0f64; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| d[(o * len + a) * inner + i] as f64;
                let m = (0..len).map(at).sum::<f64>() / len as f64;
                let v = (0..len).map(|a| (at(a) - m).powi(2)).sum::<f64>() / len as f64;
                mean[o * inner + i] = m;
                var[o * inner + i] = v;
            }
        }
        (mean, var)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let (mean, _) = self.axis_stats(x, axis);
        let len = self.shape(x)[axis] as f64;
        let shape = self.reduced_shape(x, axis);
        let t = Tensor::new(&shape, mean.iter().map(|m| (m * len) as f32).collect())?;
        Ok(self.push(t, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let (mean, _) = self.axis_stats(x, axis);
        let shape = self.reduced_shape(x, axis);
        let t = Tensor::new(&shape, mean.iter().map(|&m| m as f32).collect())?;
        Ok(self.push(t, Op::MeanAxis(x, axis), &[x]))
    }

    /// Population variance along `axis`.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("var_axis", x, axis)?;
        let (_, var) = self.axis_stats(x, axis);
        let shape = self.reduced_shape(x, axis);
        let t = Tensor::new(&shape, var.iter().map(|&v| v as f32).collect())?;
        Ok(self.push(t, Op::VarAxis(x, axis), &[x]))
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        if len == 0 {
            return Err(Error::shape("max_axis", t.shape(), &[axis]));
        }
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for a in 1..len {
                    if d[(o * len + a) * inner + i] > d[(o * len + best) * inner + i] {
                        best = a;
                    }
                }
                out[o * inner + i] = d[(o * len + best) * inner + i];
                argmax[o * inner + i] = best as u32;
            }
        }
        let shape = self.reduced_shape(x, axis);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MaxAxis { x, axis, argmax }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mx = (0..len).map(|a| d[idx(a)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0f64;
                for a in 0..len {
                    let e = ((d[idx(a)] - mx) as f64).exp();
                    out[idx(a)] = e as f32;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] = (out[idx(a)] as f64 / z) as f32;
                }
            }
        }
        let t = Tensor::new(t.shape(), out)?;
        Ok(self.push(t, Op::Softmax(x, axis), &[x]))
    }

    /// Instance standardization `(x - mean) / sqrt(var + eps)` along `axis`.
    ///
    /// A single-element axis yields zeros.
    pub fn standardize(&mut self, x: Var, axis: usize, eps: f32) -> Result<Var> {
        self.check_axis("standardize", x, axis)?;
        let (mean, var) = self.axis_stats(x, axis);
        let t = self.value(x);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let d = t.data();
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32)
            .collect();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let s = o * inner + i;
                    let k = (o * len + a) * inner + i;
                    out[k] = if len == 1 {
                        0.0
                    } else {
                        ((d[k] as f64 - mean[s]) * inv_std[s] as f64) as f32
                    };
                }
            }
        }
        let t = Tensor::new(t.shape(), out)?;
        Ok(self.push(t, Op::Standardize { x, axis, inv_std }, &[x]))
    }

    // ---------------------------------------------------------------- indexing

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Rows of `x` (along axis 0) at `idx`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = s.first().copied().unwrap_or(0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather", &s, &[bad]));
        }
        let width = numel(&s[1..]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx.iter() {
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Gather(x, idx), &[x]))
    }

    /// Sum rows of `x` into a zero tensor with `rows` rows at positions `idx`.
    pub fn scatter_add(&mut self, x: Var, idx: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.first().copied() != Some(idx.len()) {
            return Err(Error::shape("scatter_add", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_add", &s, &[bad]));
        }
        let width = numel(&s[1..]);
        let d = self.value(x).data();
        let mut out = vec![0.0; rows * width];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..width {
                out[i * width + c] += d[r * width + c];
            }
        }
        let mut shape = s.clone();
        shape[0] = rows;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ScatterAdd(x, idx), &[x]))
    }

    /// Apply a fixed sparse map to the rows of a 2-D tensor.
    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != map.cols() {
            return Err(Error::shape("sparse", &s, &[map.cols()]));
        }
        let out = map.apply(self.value(x).data(), s[1]);
        let t = Tensor::new(&[map.rows(), s[1]], out)?;
        Ok(self.push(t, Op::Sparse(x, map), &[x]))
    }

    /// Channel-wise `max_{j ∈ N(i)} (src[j] − src[query[i]])`; zero for empty neighborhoods.
    ///
    /// Neighbor lists must be sorted ascending so ties resolve to the lowest index.
    pub fn max_relative(
        &mut self,
        src: Var,
        query: Arc<Vec<usize>>,
        neighbors: &[Vec<u32>],
    ) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.len() != 2 || query.len() != neighbors.len() {
            return Err(Error::shape("max_relative", &s, &[query.len(), neighbors.len()]));
        }
        let (n, c) = (s[0], s[1]);
        let d = self.value(src).data();
        let mut out = vec![0.0; query.len() * c];
        let mut argmax = vec![NO_ARGMAX; query.len() * c];
        for (i, (&q, nb)) in query.iter().zip(neighbors).enumerate() {
            if q >= n || nb.iter().any(|&j| j as usize >= n) {
                return Err(Error::shape("max_relative", &s, &[q]));
            }
            if nb.is_empty() {
                continue;
            }
            for ch in 0..c {
                let mut best = nb[0];
                for &j in &nb[1..] {
                    if d[j as usize * c + ch] > d[best as usize * c + ch] {
                        best = j;
                    }
                }
                out[i * c + ch] = d[best as usize * c + ch] - d[q * c + ch];
                argmax[i * c + ch] = best;
            }
        }
        let t = Tensor::new(&[query.len(), c], out)?;
        Ok(self.push(t, Op::MaxRelative { src, query, argmax }, &[src]))
    }

    // ---------------------------------------------------------------- convolution

    /// 2-D convolution: x (N, Cin, H, W), w (Cout, Cin, k, k), optional bias (Cout).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &sx, &sw))?;
        let (n, cout) = (sx[0], sw[0]);
        let ohw = geom.col_cols();
        let mut out = vec![0.0; n * cout * ohw];
        let mut cols = vec![0.0; geom.col_rows() * ohw];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let in_sz = sx[1] * sx[2] * sx[3];
        for s in 0..n {
            kernels::im2col(&xd[s * in_sz..(s + 1) * in_sz], &geom, &mut cols);
            let dst = &mut out[s * cout * ohw..(s + 1) * cout * ohw];
            kernels::gemm(cout, geom.col_rows(), ohw, wd, false, &cols, false, dst, false);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, cout, ohw);
        }
        let t = Tensor::new(&[n, cout, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed 2-D convolution: x (N, Cin, H, W), w (Cin, Cout, k, k).
    ///
    /// Output extent is `(H − 1)·stride − 2·pad + k + out_pad`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || out_pad >= stride
        {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let (n, cin, h, wd_) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[1], sw[2]);
        let oh = ((h - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", &sx, &sw))?;
        let ow = ((wd_ - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", &sx, &sw))?;
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd_)
            .ok_or_else(|| Error::shape("conv_transpose2d", &sx, &sw))?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv_transpose2d bias", self.shape(b), &[cout]));
            }
        }
        let hw = h * wd_;
        let out_sz = cout * oh * ow;
        let mut out = vec![0.0; n * out_sz];
        let mut cols = vec![0.0; geom.col_rows() * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
            kernels::gemm(geom.col_rows(), cin, hw, wv, true, xs, false, &mut cols, false);
            kernels::col2im(&cols, &geom, &mut out[s * out_sz..(s + 1) * out_sz]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, cout, oh * ow);
        }
        let t = Tensor::new(&[n, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    // ---------------------------------------------------------------- backward

    /// Gradients of the scalar `loss` with respect to every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads = BTreeMap::new();
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads.insert(id, Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        Ok(Gradients::new(leaf_grads, params))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, kernels::reduce_to(g, out.shape(), val(*a).shape()));
                self.accumulate(grads, *b, kernels::reduce_to(g, out.shape(), val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, kernels::reduce_to(g, out.shape(), val(*a).shape()));
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, kernels::reduce_to(&neg, out.shape(), val(*b).shape()));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (val(*a), val(*b));
                let sa = kernels::broadcast_strides(ta.shape(), out.shape());
                let sb = kernels::broadcast_strides(tb.shape(), out.shape());
                let mut ga = vec![0.0; out.numel()];
                let mut gb = vec![0.0; out.numel()];
                let (da, db) = (ta.data(), tb.data());
                kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| {
                    if is_div {
                        ga[o] = g[o] / db[j];
                        gb[o] = -g[o] * da[i] / (db[j] * db[j]);
                    } else {
                        ga[o] = g[o] * db[j];
                        gb[o] = g[o] * da[i];
                    }
                });
                self.accumulate(grads, *a, kernels::reduce_to(&ga, out.shape(), ta.shape()));
                self.accumulate(grads, *b, kernels::reduce_to(&gb, out.shape(), tb.shape()));
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::Shift(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                let d = val(*x).data();
                let gx = g.iter().zip(d).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 });
                self.accumulate(grads, *x, gx.collect());
            }
            Op::LeakyRelu(x, slope) => {
                let d = val(*x).data();
                let gx = g.iter().zip(d).map(|(g, &v)| if v > 0.0 { *g } else { g * slope });
                self.accumulate(grads, *x, gx.collect());
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(out.data()).map(|(g, y)| g * y);
                self.accumulate(grads, *x, gx.collect());
            }
            Op::Log(x) => {
                let gx = g.iter().zip(val(*x).data()).map(|(g, v)| g / v);
                self.accumulate(grads, *x, gx.collect());
            }
            Op::Sqrt(x) => {
                // Subgradient 0 at the origin keeps sqrt(max(·, 0)) finite.
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, &y)| if y > 0.0 { 0.5 * g / y } else { 0.0 });
                self.accumulate(grads, *x, gx.collect());
            }
            Op::ClampMin(x, m) => {
                let d = val(*x).data();
                let gx = g.iter().zip(d).map(|(g, v)| if v >= m { *g } else { 0.0 });
                self.accumulate(grads, *x, gx.collect());
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y));
                self.accumulate(grads, *x, gx.collect());
            }
            Op::Abs(x) => {
                let d = val(*x).data();
                let gx = g.iter().zip(d).map(|(g, &v)| {
                    if v > 0.0 {
                        *g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx.collect());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, tb.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g, false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                self.accumulate(grads, *x, transpose2(g, s[0], s[1]));
            }
            Op::Sum(x) => self.accumulate(grads, *x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let t = val(*x);
                let (outer, len, inner) = kernels::axis_split(t.shape(), *axis);
                let f = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f32
                } else {
                    1.0
                };
                let mut gx = vec![0.0; t.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            gx[(o * len + a) * inner + i] = g[o * inner + i] * f;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::VarAxis(x, axis) => {
                let t = val(*x);
                let (outer, len, inner) = kernels::axis_split(t.shape(), *axis);
                let d = t.data();
                let mut gx = vec![0.0; t.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let m = (0..len).map(|a| d[at(a)] as f64).sum::<f64>() / len as f64;
                        let gs = g[o * inner + i] as f64 * 2.0 / len as f64;
                        for a in 0..len {
                            gx[at(a)] = (gs * (d[at(a)] as f64 - m)) as f32;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaxAxis { x, axis, argmax } => {
                let t = val(*x);
                let (outer, len, inner) = kernels::axis_split(t.shape(), *axis);
                let mut gx = vec![0.0; t.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let a = argmax[o * inner + i] as usize;
                        gx[(o * len + a) * inner + i] += g[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| (g[at(a)] * y[at(a)]) as f64).sum();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot as f32);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Standardize { x, axis, inv_std } => {
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                if len > 1 {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let mg = (0..len).map(|a| g[at(a)] as f64).sum::<f64>() / len as f64;
                            let mgy = (0..len).map(|a| (g[at(a)] * y[at(a)]) as f64).sum::<f64>()
                                / len as f64;
                            let s = inv_std[o * inner + i] as f64;
                            for a in 0..len {
                                let v = s * (g[at(a)] as f64 - mg - y[at(a)] as f64 * mgy);
                                gx[at(a)] = v as f32;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::axis_split(out.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    let mut gx = Vec::with_capacity(val(v).numel());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gx.extend_from_slice(&g[base..base + len * inner]);
                    }
                    self.accumulate(grads, v, gx);
                    start += len;
                }
            }
            Op::Gather(x, idx) => {
                let t = val(*x);
                let width = numel(&t.shape()[1..]);
                let mut gx = vec![0.0; t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..width {
                        gx[i * width + c] += g[r * width + c];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterAdd(x, idx) => {
                let width = numel(&out.shape()[1..]);
                let mut gx = Vec::with_capacity(idx.len() * width);
                for &i in idx.iter() {
                    gx.extend_from_slice(&g[i * width..(i + 1) * width]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sparse(x, map) => {
                let c = out.shape()[1];
                self.accumulate(grads, *x, map.apply_transpose(g, c));
            }
            Op::MaxRelative { src, query, argmax } => {
                let t = val(*src);
                let c = t.shape()[1];
                let mut gx = vec![0.0; t.numel()];
                for (i, &q) in query.iter().enumerate() {
                    for ch in 0..c {
                        let j = argmax[i * c + ch];
                        if j != NO_ARGMAX {
                            gx[j as usize * c + ch] += g[i * c + ch];
                            gx[q * c + ch] -= g[i * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *src, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                let n = tx.shape()[0];
                let cout = tw.shape()[0];
                let (ck, ohw) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let mut cols = vec![0.0; ck * ohw];
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut gx = vec![0.0; if need_x { tx.numel() } else { 0 }];
                let mut gw = vec![0.0; if need_w { tw.numel() } else { 0 }];
                for s in 0..n {
                    let gs = &g[s * cout * ohw..(s + 1) * cout * ohw];
                    if need_w {
                        kernels::im2col(&tx.data()[s * in_sz..(s + 1) * in_sz], geom, &mut cols);
                        kernels::gemm(cout, ohw, ck, gs, false, &cols, true, &mut gw, true);
                    }
                    if need_x {
                        kernels::gemm(ck, cout, ohw, tw.data(), true, gs, false, &mut cols, false);
                        kernels::col2im(&cols, geom, &mut gx[s * in_sz..(s + 1) * in_sz]);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, gx);
                }
                if need_w {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(g, n, cout, ohw));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, cin) = (tx.shape()[0], tx.shape()[1]);
                let cout = geom.channels;
                let hw = geom.col_cols();
                let out_sz = cout * geom.height * geom.width;
                let ck = geom.col_rows();
                let mut cols = vec![0.0; ck * hw];
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut gx = vec![0.0; if need_x { tx.numel() } else { 0 }];
                let mut gw = vec![0.0; if need_w { tw.numel() } else { 0 }];
                for s in 0..n {
                    kernels::im2col(&g[s * out_sz..(s + 1) * out_sz], geom, &mut cols);
                    if need_x {
                        let dst = &mut gx[s * cin * hw..(s + 1) * cin * hw];
                        kernels::gemm(cin, ck, hw, tw.data(), false, &cols, false, dst, false);
                    }
                    if need_w {
                        let xs = &tx.data()[s * cin * hw..(s + 1) * cin * hw];
                        kernels::gemm(cin, hw, ck, xs, false, &cols, true, &mut gw, true);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, gx);
                }
                if need_w {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(
                        grads,
                        *b,
                        channel_sums(g, n, cout, geom.height * geom.width),
                    );
                }
            }
        }
    }
}

fn transpose2(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], n: usize, c: usize, hw: usize) {
    for s in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            let base = (s * c + ch) * hw;
            for v in &mut out[base..base + hw] {
                *v += b;
            }
        }
    }
}

fn channel_sums(g: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0f64; c];
    for s in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * hw;
            *acc += g[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}
