//! Tape-based computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so every input id is smaller than
//! the id of the node consuming it and a reverse sweep over ids is a valid
//! topological order for the backward pass.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{AutodiffError, Result};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Numeric mode of forward values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    /// Every forward value is rounded to the nearest 32-bit float. Inference only.
    F32,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L1Normalize(Var, usize),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, Vec<usize>),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and their outputs for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const PAR_THRESHOLD: usize = 1 << 16;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a value that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Inserts a differentiable leaf (a parameter or a probed input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale(a, c), rg))
    }

    /// Adds a bias vector along the last axis. The only broadcast supported.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let vx = self.value(x);
        let vb = self.value(b);
        let c = vb.numel();
        if vb.shape().len() != 1 || vx.shape().last() != Some(&c) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, bias) in row.iter_mut().zip(vb.data()) {
                *o += bias;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` for `a: [n, k]`, `b: [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let data = mm(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul_bt", a)?;
        let (m, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_bt",
                lhs: vec![n, k],
                rhs: vec![m, k2],
            });
        }
        let data = mm_bt(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::MatMulBt(a, b), rg))
    }

    /// `x · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_bt(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, len, inner) = split_axis("softmax", vx.shape(), axis)?;
        let mut out = vx.data().to_vec();
        for_lanes(outer, len, inner, |lane| {
            let m = lane.iter().map(|&i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for &i in lane {
                out[i] = (out[i] - m).exp();
                s += out[i];
            }
            for &i in lane {
                out[i] /= s;
            }
        });
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, len, inner) = split_axis("log_softmax", vx.shape(), axis)?;
        let mut out = vx.data().to_vec();
        for_lanes(outer, len, inner, |lane| {
            let m = lane.iter().map(|&i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = lane.iter().map(|&i| (out[i] - m).exp()).sum();
            let lse = m + s.ln();
            for &i in lane {
                out[i] -= lse;
            }
        });
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x, axis), rg))
    }

    /// Divides each lane along `axis` by its L1 norm. An all-zero lane maps to
    /// the uniform distribution.
    pub fn l1_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, len, inner) = split_axis("l1_normalize", vx.shape(), axis)?;
        let mut out = vx.data().to_vec();
        for_lanes(outer, len, inner, |lane| {
            let s: f64 = lane.iter().map(|&i| out[i].abs()).sum();
            for &i in lane {
                out[i] = if s == 0.0 { 1.0 / len as f64 } else { out[i] / s };
            }
        });
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L1Normalize(x, axis), rg))
    }

    /// Selects rows (leading-axis slices) of `x` by index.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().is_empty() {
            return Err(AutodiffError::InvalidAxis {
                op: "gather",
                axis: 0,
                shape: vec![],
            });
        }
        let rows = vx.rows();
        let w = vx.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx.iter() {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "gather",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(vx.row(i));
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather(x, idx), rg))
    }

    /// Accumulates row `r` of `x` into output row `idx[r]`; output has `rows` rows.
    pub fn scatter_add(&mut self, x: Var, idx: Arc<[usize]>, rows: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().is_empty() || vx.rows() != idx.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add",
                lhs: vx.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = rows;
        let out = scatter_rows(vx, &idx, rows, "scatter_add")?;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ScatterAdd(x, idx), rg))
    }

    fn reduce(&mut self, x: Var, axis: usize, op: &'static str, mean: bool) -> Result<Var> {
        let vx = self.value(x);
        let (outer, len, inner) = split_axis(op, vx.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let src = vx.data();
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        let node = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(t, node, rg))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, "sum", false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, "mean", true)
    }

    /// Maximum over `axis`; the first maximal entry receives the gradient.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, len, inner) = split_axis("max", vx.shape(), axis)?;
        let src = vx.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    let slot = o * inner + i;
                    if j == 0 || v > out[slot] {
                        out[slot] = v;
                        arg[slot] = base + i;
                    }
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Max(x, arg), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(AutodiffError::InvalidAxis {
            op: "concat",
            axis,
            shape: vec![],
        })?;
        let base_shape = self.shape(first).to_vec();
        split_axis("concat", &base_shape, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`. Leaves that require gradients but do
    /// not influence the loss get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.propagate(node, gy, &mut grads)?;
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        let shape = y.shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, gy.clone());
                self.accumulate(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                let neg = map(&gy, |g| -g);
                self.accumulate(grads, *b, neg);
                self.accumulate(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip(&gy, vb, |g, x| g * x));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip(&gy, va, |g, x| g * x));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, map(&gy, |g| g * c)),
            Op::AddBias(x, b) => {
                if self.requires_grad(*b) {
                    let c = self.value(*b).numel();
                    let mut db = vec![0.0; c];
                    for row in gy.data().chunks(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![c], db)?);
                }
                self.accumulate(grads, *x, gy);
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.value(*a));
                let m = shape[1];
                if self.requires_grad(*a) {
                    let da = mm_bt(gy.data(), self.value(*b).data(), n, m, k);
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], da)?);
                }
                if self.requires_grad(*b) {
                    let db = mm_at(self.value(*a).data(), gy.data(), n, k, m);
                    self.accumulate(grads, *b, Tensor::new(vec![k, m], db)?);
                }
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = dims2(self.value(*a));
                let m = shape[1];
                if self.requires_grad(*a) {
                    let da = mm(gy.data(), self.value(*b).data(), n, m, k);
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], da)?);
                }
                if self.requires_grad(*b) {
                    let db = mm_at(gy.data(), self.value(*a).data(), n, m, k);
                    self.accumulate(grads, *b, Tensor::new(vec![m, k], db)?);
                }
            }
            Op::Relu(x) => {
                let g = zip(&gy, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, g);
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = split_axis("softmax", &shape, *axis)?;
                let mut dx = vec![0.0; y.numel()];
                let (yd, gd) = (y.data(), gy.data());
                for_lanes(outer, len, inner, |lane| {
                    let s: f64 = lane.iter().map(|&i| gd[i] * yd[i]).sum();
                    for &i in lane {
                        dx[i] = yd[i] * (gd[i] - s);
                    }
                });
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = split_axis("log_softmax", &shape, *axis)?;
                let mut dx = vec![0.0; y.numel()];
                let (yd, gd) = (y.data(), gy.data());
                for_lanes(outer, len, inner, |lane| {
                    let s: f64 = lane.iter().map(|&i| gd[i]).sum();
                    for &i in lane {
                        dx[i] = gd[i] - yd[i].exp() * s;
                    }
                });
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::L1Normalize(x, axis) => {
                let (outer, len, inner) = split_axis("l1_normalize", &shape, *axis)?;
                let xd = self.value(*x).data();
                let gd = gy.data();
                let mut dx = vec![0.0; y.numel()];
                for_lanes(outer, len, inner, |lane| {
                    let s: f64 = lane.iter().map(|&i| xd[i].abs()).sum();
                    if s == 0.0 {
                        return;
                    }
                    let t: f64 = lane.iter().map(|&i| gd[i] * xd[i]).sum();
                    for &i in lane {
                        let sign = if xd[i] > 0.0 {
                            1.0
                        } else if xd[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dx[i] = gd[i] / s - sign * t / (s * s);
                    }
                });
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::Gather(x, idx) => {
                let vx = self.value(*x);
                let out = scatter_rows(&gy, idx, vx.rows(), "gather")?;
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), out)?);
            }
            Op::ScatterAdd(x, idx) => {
                let vx = self.value(*x);
                let mut data = Vec::with_capacity(vx.numel());
                for &i in idx.iter() {
                    data.extend_from_slice(gy.row(i));
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), data)?);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, len, inner) = split_axis("sum", &xs, *axis)?;
                let c = if matches!(node.op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
                let gd = gy.data();
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            dx[base + i] = gd[o * inner + i] * c;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Max(x, arg) => {
                let xs = self.value(*x).shape().to_vec();
                let mut dx = vec![0.0; xs.iter().product()];
                for (slot, &src) in arg.iter().enumerate() {
                    dx[src] += gy.data()[slot];
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::SumAll(x) => {
                let g = gy.item();
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&xs, g));
            }
            Op::Concat(xs, axis) => {
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let vs = self.value(v).shape().to_vec();
                    let w = vs[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            d.extend_from_slice(&gy.data()[o * total + offset..o * total + offset + w]);
                        }
                        self.accumulate(grads, v, Tensor::new(vs, d)?);
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, gy.reshaped(xs)?);
            }
        }
        Ok(())
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|v| f(*v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn scatter_rows(src: &Tensor, idx: &[usize], rows: usize, op: &'static str) -> Result<Vec<f64>> {
    let w = src.row_len();
    let mut out = vec![0.0; rows * w];
    for (r, &i) in idx.iter().enumerate() {
        if i >= rows {
            return Err(AutodiffError::IndexOutOfBounds { op, index: i, len: rows });
        }
        let dst = &mut out[i * w..(i + 1) * w];
        for (d, s) in dst.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
    Ok(out)
}

/// Calls `f` with the flat indices of every lane along the split axis.
fn for_lanes(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = (o * len + j) * inner + i;
            }
            f(&lane);
        }
    }
}

/// `c[n×m] = a[n×k] · b[k×m]`. Rows are independent, so the parallel split
/// does not change any summation order.
pub(crate) fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    if m == 0 {
        return c;
    }
    let row = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        c.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        c.chunks_mut(m).enumerate().for_each(row);
    }
    c
}

/// `c[n×m] = a[n×k] · b[m×k]ᵀ`.
pub(crate) fn mm_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * m];
    for j in 0..m {
        for p in 0..k {
            bt[p * m + j] = b[j * k + p];
        }
    }
    mm(a, &bt, n, k, m)
}

/// `c[k×m] = a[n×k]ᵀ · b[n×m]`.
pub(crate) fn mm_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}
