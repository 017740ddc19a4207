//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes exactly one
//! node whose inputs already exist, so insertion order is a topological
//! order and [`Graph::backward`] is a single reverse sweep. Leaves own the
//! accumulated gradients; intermediate gradients are dropped after the sweep.

use super::dense::{axis_extents, Tensor};
use super::kernels::{self, Broadcast};
use crate::error::{dim_err, Error, Result};
use crate::metrics::nn::nearest_neighbors;
use crate::ssm::scan::{self, ScanDims};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Softplus,
    Sigmoid,
    Square,
    Relu,
    Silu,
    Abs,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Cosine and norm guard.
pub const EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        op: BinaryOp,
        a: NodeId,
        b: NodeId,
        plan: Broadcast,
    },
    Unary {
        op: UnaryOp,
        a: NodeId,
    },
    Affine {
        a: NodeId,
        scale: f64,
    },
    Reduce {
        op: ReduceOp,
        a: NodeId,
        axis: usize,
        argmax: Vec<usize>,
    },
    DwConv1d {
        x: NodeId,
        kernel: NodeId,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
        axis: usize,
        dots: Vec<f64>,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: NodeId,
    },
    Permute {
        a: NodeId,
        perm: Vec<usize>,
    },
    GatherRows {
        a: NodeId,
        index: Vec<usize>,
    },
    Scan(Box<ScanNode>),
    Chamfer(Box<ChamferNode>),
}

#[derive(Debug)]
struct ScanNode {
    dims: ScanDims,
    inputs: [NodeId; 6],
    states: Vec<f64>,
}

#[derive(Debug)]
struct ChamferNode {
    pred: NodeId,
    gt: NodeId,
    batch: usize,
    n_pred: usize,
    n_gt: usize,
    pred_to_gt: Vec<usize>,
    gt_to_pred: Vec<usize>,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let requires_grad = t.requires_grad();
        self.push(Op::Leaf, t, requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Replace the data of a leaf in place (used by finite differences).
    pub fn set_leaf_data(&mut self, id: NodeId, data: &[f64]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Usage("set_leaf_data on a non-leaf node".into()));
        }
        if data.len() != node.value.numel() {
            return Err(dim_err!(
                "leaf holds {} values, got {}",
                node.value.numel(),
                data.len()
            ));
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, value, rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out_shape, plan) = Broadcast::plan(self.shape(a), self.shape(b))?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let f: fn(f64, f64) -> f64 = match op {
                BinaryOp::Add => |x, y| x + y,
                BinaryOp::Sub => |x, y| x - y,
                BinaryOp::Mul => |x, y| x * y,
            };
            plan.for_each(n, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Binary { op, a, b, plan }, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> NodeId {
        let x = self.value(a);
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Exp => f64::exp,
            UnaryOp::Softplus => softplus,
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Square => |v| v * v,
            UnaryOp::Relu => |v| v.max(0.0),
            UnaryOp::Silu => |v| v * sigmoid(v),
            UnaryOp::Abs => f64::abs,
            UnaryOp::Neg => |v| -v,
        };
        let value = Tensor::from_fn(x.shape().to_vec(), |i| f(x.data()[i]));
        let rg = self.rg(&[a]);
        self.push(Op::Unary { op, a }, value, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Square, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Neg, a)
    }

    /// `a * scale + shift`
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let x = self.value(a);
        let value = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * scale + shift);
        let rg = self.rg(&[a]);
        self.push(Op::Affine { a, scale }, value, rg)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: NodeId, axis: usize) -> Result<NodeId> {
        let x = self.value(a);
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(dim_err!(
                "reduce axis {axis} on rank-{} tensor",
                shape.len()
            ));
        }
        let (outer, n, inner) = axis_extents(shape, axis);
        if n == 0 {
            return Err(Error::Domain(format!("reduce over empty axis {axis}")));
        }
        let data = x.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += data[base + i];
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceOp::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = data[o * n * inner + i];
                        let mut best_j = 0;
                        for j in 1..n {
                            let v = data[(o * n + j) * inner + i];
                            // strict comparison keeps the first index on ties
                            if v > best {
                                best = v;
                                best_j = j;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_j;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::Reduce {
                op,
                a,
                axis,
                argmax,
            },
            value,
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn max(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceOp::Max, a, axis)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.mean(flat, 0)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "mse of {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Depthwise 1-D convolution over the last axis of `x[B×D×G]` with
    /// `kernel[D×W]`, zero "same" padding. `W` must be odd.
    pub fn dwconv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 2 || sk[0] != sx[1] {
            return Err(dim_err!("dwconv1d of {sx:?} with kernel {sk:?}"));
        }
        let (b, d, g, w) = (sx[0], sx[1], sx[2], sk[1]);
        if w % 2 == 0 {
            return Err(Error::Config(format!(
                "dwconv1d kernel width {w} must be odd"
            )));
        }
        let half = (w / 2) as isize;
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; b * d * g];
        for bi in 0..b {
            for di in 0..d {
                let row = &xv[(bi * d + di) * g..(bi * d + di + 1) * g];
                let krow = &kv[di * w..(di + 1) * w];
                let orow = &mut out[(bi * d + di) * g..(bi * d + di + 1) * g];
                for (gi, o) in orow.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, &kw) in krow.iter().enumerate() {
                        let src = gi as isize + j as isize - half;
                        if src >= 0 && (src as usize) < g {
                            acc += kw * row[src as usize];
                        }
                    }
                    *o = acc;
                }
            }
        }
        let value = Tensor::new(vec![b, d, g], out)?;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(Op::DwConv1d { x, kernel }, value, rg))
    }

    /// Cosine similarity of `a` and `b` along `axis`, which is removed from
    /// the output. Norms are guarded by [`EPS`]; values are clamped to
    /// `[-1, 1]`.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) {
            return Err(dim_err!("cosine_sim of {:?} vs {:?}", shape, self.shape(b)));
        }
        if axis >= shape.len() {
            return Err(dim_err!(
                "cosine axis {axis} on rank-{} tensor",
                shape.len()
            ));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let m = outer * inner;
        let (mut dots, mut na, mut nb) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    let (x, y) = (av[base + i], bv[base + i]);
                    dots[o * inner + i] += x * y;
                    na[o * inner + i] += x * x;
                    nb[o * inner + i] += y * y;
                }
            }
        }
        // √(‖a‖²‖b‖²) rounds so that cos(x, x) is exactly 1
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let denom = if na[i].min(nb[i]) >= EPS * EPS {
                    (na[i] * nb[i]).sqrt()
                } else {
                    na[i].sqrt().max(EPS) * nb[i].sqrt().max(EPS)
                };
                (dots[i] / denom).clamp(-1.0, 1.0)
            })
            .collect();
        na.iter_mut().for_each(|v| *v = v.sqrt());
        nb.iter_mut().for_each(|v| *v = v.sqrt());
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Op::Cosine {
                a,
                b,
                axis,
                dots,
                norms_a: na,
                norms_b: nb,
            },
            value,
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(dim_err!(
                "concat axis {axis} on rank-{} tensor",
                base_shape.len()
            ));
        }
        let mut total = 0;
        for id in inputs {
            let s = self.shape(*id);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(dim_err!(
                    "concat of {:?} with {:?} on axis {axis}",
                    base_shape,
                    s
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for id in inputs {
                let t = self.value(*id);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!(
                "slice [{start}, {}) on axis {axis} of {:?}",
                start + len,
                shape
            ));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&data[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Slice { a, axis, start }, value, rg))
    }

    /// Splits `axis` into `sections` equal parts.
    pub fn split(&mut self, a: NodeId, sections: usize, axis: usize) -> Result<Vec<NodeId>> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(dim_err!("split axis {axis} on rank-{} tensor", shape.len()));
        }
        let n = shape[axis];
        if sections == 0 || n % sections != 0 {
            return Err(Error::Config(format!(
                "axis of size {n} is not divisible into {sections} sections"
            )));
        }
        let step = n / sections;
        (0..sections)
            .map(|s| self.slice(a, axis, s * step, step))
            .collect()
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape { a }, value, rg))
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(data.len());
        let rank = shape.len();
        let mut idx = vec![0usize; rank];
        for _ in 0..data.len() {
            let src: usize = (0..rank).map(|i| idx[i] * in_strides[perm[i]]).sum();
            out.push(data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(dim_err!("transpose of rank-{rank} tensor"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(a, &perm)
    }

    /// Rows of a 2-D tensor picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(dim_err!("gather_rows on shape {shape:?}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(bad) = index.iter().find(|&&r| r >= rows) {
            return Err(dim_err!("gather row {bad} out of {rows}"));
        }
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in &index {
            out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::GatherRows { a, index }, value, rg))
    }

    /// Selective scan over `x[B×L×Di]` with step sizes `delta[B×L×Di]`,
    /// transition `a[Di×N]`, input/output projections `b, c[B×L×N]` and skip
    /// scale `skip[Di]`. Every `delta` must be positive.
    pub fn selective_scan(
        &mut self,
        x: NodeId,
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        skip: NodeId,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(dim_err!("selective_scan input {sx:?} is not B×L×D"));
        }
        let sa = self.shape(a);
        if sa.len() != 2 || sa[0] != sx[2] {
            return Err(dim_err!(
                "transition {:?} does not match channels {}",
                sa,
                sx[2]
            ));
        }
        let dims = ScanDims {
            batch: sx[0],
            len: sx[1],
            channels: sx[2],
            state: sa[1],
        };
        let seq = vec![dims.batch, dims.len, dims.state];
        if self.shape(delta) != sx.as_slice()
            || self.shape(b) != seq.as_slice()
            || self.shape(c) != seq.as_slice()
            || self.shape(skip) != [dims.channels]
        {
            return Err(dim_err!(
                "selective_scan shapes: delta {:?}, b {:?}, c {:?}, skip {:?} for x {:?}",
                self.shape(delta),
                self.shape(b),
                self.shape(c),
                self.shape(skip),
                sx
            ));
        }
        if let Some(bad) = self
            .value(delta)
            .data()
            .iter()
            .find(|&&d| d <= 0.0 || !d.is_finite())
        {
            return Err(Error::Domain(format!(
                "selective_scan step size {bad} is not positive"
            )));
        }
        let mut states = vec![0.0; dims.batch * dims.len * dims.channels * dims.state];
        let mut y = vec![0.0; dims.batch * dims.len * dims.channels];
        scan::scan_forward(
            &dims,
            scan::ScanInputs {
                x: self.value(x).data(),
                delta: self.value(delta).data(),
                a: self.value(a).data(),
                b: self.value(b).data(),
                c: self.value(c).data(),
                skip: self.value(skip).data(),
            },
            &mut states,
            &mut y,
        );
        let value = Tensor::new(sx, y)?;
        let inputs = [x, delta, a, b, c, skip];
        let rg = self.rg(&inputs);
        Ok(self.push(
            Op::Scan(Box::new(ScanNode {
                dims,
                inputs,
                states,
            })),
            value,
            rg,
        ))
    }

    /// Batch-mean Chamfer distance (squared L2, mean per direction, summed)
    /// between `pred[B×N×3]` and `gt[B×M×3]`. Nearest-neighbour assignments
    /// are held fixed in the backward pass.
    pub fn chamfer(&mut self, pred: NodeId, gt: NodeId) -> Result<NodeId> {
        let (sp, sg) = (self.shape(pred), self.shape(gt));
        if sp.len() != 3 || sg.len() != 3 || sp[2] != 3 || sg[2] != 3 || sp[0] != sg[0] {
            return Err(dim_err!("chamfer of {sp:?} vs {sg:?}"));
        }
        let (batch, n_pred, n_gt) = (sp[0], sp[1], sg[1]);
        if n_pred == 0 || n_gt == 0 {
            return Err(Error::Domain("chamfer of an empty cloud".into()));
        }
        let (pv, gv) = (self.value(pred).data(), self.value(gt).data());
        let mut pred_to_gt = Vec::with_capacity(batch * n_pred);
        let mut gt_to_pred = Vec::with_capacity(batch * n_gt);
        let mut total = 0.0;
        for bi in 0..batch {
            let p = as_points(&pv[bi * n_pred * 3..(bi + 1) * n_pred * 3]);
            let q = as_points(&gv[bi * n_gt * 3..(bi + 1) * n_gt * 3]);
            let fwd = nearest_neighbors(&p, &q);
            let bwd = nearest_neighbors(&q, &p);
            total += fwd.iter().map(|(_, d)| d).sum::<f64>() / n_pred as f64
                + bwd.iter().map(|(_, d)| d).sum::<f64>() / n_gt as f64;
            pred_to_gt.extend(fwd.iter().map(|(i, _)| *i));
            gt_to_pred.extend(bwd.iter().map(|(i, _)| *i));
        }
        let value = Tensor::scalar(total / batch as f64);
        let rg = self.rg(&[pred, gt]);
        Ok(self.push(
            Op::Chamfer(Box::new(ChamferNode {
                pred,
                gt,
                batch,
                n_pred,
                n_gt,
                pred_to_gt,
                gt_to_pred,
            })),
            value,
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss.0];
        if lv.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward from non-scalar of shape {:?}",
                lv.value.shape()
            )));
        }
        if !lv.requires_grad {
            return Err(Error::Usage(
                "backward from a loss that does not require grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                if self.nodes[id].requires_grad {
                    self.nodes[id].value.accumulate_grad(&g)?;
                }
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |n: NodeId| self.nodes[n.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, val(*b), ga, *m, *k, *n);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(val(*a), g, gb, *m, *k, *n);
                }
            }
            Op::Binary { op, a, b, plan } => {
                let n = g.len();
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            plan.for_each(n, |o, ia, _| ga[ia] += g[o])
                        }
                        BinaryOp::Mul => plan.for_each(n, |o, ia, ib| ga[ia] += g[o] * bv[ib]),
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    match op {
                        BinaryOp::Add => plan.for_each(n, |o, _, ib| gb[ib] += g[o]),
                        BinaryOp::Sub => plan.for_each(n, |o, _, ib| gb[ib] -= g[o]),
                        BinaryOp::Mul => plan.for_each(n, |o, ia, ib| gb[ib] += g[o] * av[ia]),
                    }
                }
            }
            Op::Unary { op, a } => {
                let (x, y) = (val(*a), node.value.data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        let d = match op {
                            UnaryOp::Exp => y[i],
                            UnaryOp::Softplus => sigmoid(x[i]),
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Square => 2.0 * x[i],
                            UnaryOp::Relu => (x[i] > 0.0) as u8 as f64,
                            UnaryOp::Silu => {
                                let s = sigmoid(x[i]);
                                s * (1.0 + x[i] * (1.0 - s))
                            }
                            UnaryOp::Abs => x[i].signum() * (x[i] != 0.0) as u8 as f64,
                            UnaryOp::Neg => -1.0,
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Affine { a, scale } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * scale);
                }
            }
            Op::Reduce {
                op,
                a,
                axis,
                argmax,
            } => {
                let shape = self.nodes[a.0].value.shape();
                let (outer, n, inner) = axis_extents(shape, *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    match op {
                        ReduceOp::Sum | ReduceOp::Mean => {
                            let s = if *op == ReduceOp::Mean {
                                1.0 / n as f64
                            } else {
                                1.0
                            };
                            for o in 0..outer {
                                for j in 0..n {
                                    let base = (o * n + j) * inner;
                                    for i in 0..inner {
                                        ga[base + i] += g[o * inner + i] * s;
                                    }
                                }
                            }
                        }
                        ReduceOp::Max => {
                            for o in 0..outer {
                                for i in 0..inner {
                                    let j = argmax[o * inner + i];
                                    ga[(o * n + j) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::DwConv1d { x, kernel } => {
                let s = self.nodes[x.0].value.shape();
                let (b, d, gl) = (s[0], s[1], s[2]);
                let w = self.nodes[kernel.0].value.shape()[1];
                let half = (w / 2) as isize;
                let (xv, kv) = (val(*x), val(*kernel));
                let mut gx = self.slot(grads, *x).map(std::mem::take);
                let mut gk = self.slot(grads, *kernel).map(std::mem::take);
                for bi in 0..b {
                    for di in 0..d {
                        let off = (bi * d + di) * gl;
                        for gi in 0..gl {
                            let go = g[off + gi];
                            for j in 0..w {
                                let src = gi as isize + j as isize - half;
                                if src < 0 || src as usize >= gl {
                                    continue;
                                }
                                let src = src as usize;
                                if let Some(gx) = gx.as_mut() {
                                    gx[off + src] += go * kv[di * w + j];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[di * w + j] += go * xv[off + src];
                                }
                            }
                        }
                    }
                }
                if let Some(v) = gx {
                    *grads[x.0].as_mut().unwrap() = v;
                }
                if let Some(v) = gk {
                    *grads[kernel.0].as_mut().unwrap() = v;
                }
            }
            Op::Cosine {
                a,
                b,
                axis,
                dots,
                norms_a,
                norms_b,
            } => {
                let shape = self.nodes[a.0].value.shape();
                let (outer, n, inner) = axis_extents(shape, *axis);
                let (av, bv) = (val(*a), val(*b));
                for (target, other, own_norms, other_norms) in
                    [(*a, bv, norms_a, norms_b), (*b, av, norms_b, norms_a)]
                {
                    let own = val(target);
                    let Some(gt) = self.slot(grads, target) else {
                        continue;
                    };
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            let (nu, nv) = (own_norms[r].max(EPS), other_norms[r].max(EPS));
                            let c1 = g[r] / (nu * nv);
                            // the norm term only exists while the guard is inactive
                            let c2 = if own_norms[r] > EPS {
                                g[r] * dots[r] / (nu * nu * nu * nv)
                            } else {
                                0.0
                            };
                            for j in 0..n {
                                let e = (o * n + j) * inner + i;
                                gt[e] += c1 * other[e] - c2 * own[e];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_extents(out_shape, *axis);
                let mut offset = 0;
                for id in inputs {
                    let n = self.nodes[id.0].value.shape()[*axis];
                    if let Some(gi) = self.slot(grads, *id) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for k in 0..n * inner {
                                gi[dst + k] += g[src + k];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, n, inner) = axis_extents(self.nodes[a.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            ga[dst + k] += g[src + k];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
            }
            Op::Permute { a, perm } => {
                let in_shape = self.nodes[a.0].value.shape();
                let out_shape = node.value.shape();
                let in_strides = strides(in_shape);
                let rank = in_shape.len();
                if let Some(ga) = self.slot(grads, *a) {
                    let mut idx = vec![0usize; rank];
                    for go in g {
                        let src: usize = (0..rank).map(|i| idx[i] * in_strides[perm[i]]).sum();
                        ga[src] += go;
                        for ax in (0..rank).rev() {
                            idx[ax] += 1;
                            if idx[ax] < out_shape[ax] {
                                break;
                            }
                            idx[ax] = 0;
                        }
                    }
                }
            }
            Op::GatherRows { a, index } => {
                let cols = self.nodes[a.0].value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &r) in index.iter().enumerate() {
                        for c in 0..cols {
                            ga[r * cols + c] += g[k * cols + c];
                        }
                    }
                }
            }
            Op::Scan(s) => {
                let [x, delta, a, b, c, skip] = s.inputs;
                let sg = scan::scan_backward(
                    &s.dims,
                    scan::ScanInputs {
                        x: val(x),
                        delta: val(delta),
                        a: val(a),
                        b: val(b),
                        c: val(c),
                        skip: val(skip),
                    },
                    &s.states,
                    g,
                );
                for (id, part) in [
                    (x, sg.x),
                    (delta, sg.delta),
                    (a, sg.a),
                    (b, sg.b),
                    (c, sg.c),
                    (skip, sg.skip),
                ] {
                    if let Some(acc) = self.slot(grads, id) {
                        acc.iter_mut().zip(&part).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Chamfer(ch) => {
                let scale = g[0] / ch.batch as f64;
                let (pv, gv) = (val(ch.pred), val(ch.gt));
                let mut gp = vec![0.0; pv.len()];
                let mut gq = vec![0.0; gv.len()];
                for bi in 0..ch.batch {
                    let (po, qo) = (bi * ch.n_pred, bi * ch.n_gt);
                    let wp = 2.0 * scale / ch.n_pred as f64;
                    for i in 0..ch.n_pred {
                        let j = qo + ch.pred_to_gt[po + i];
                        for k in 0..3 {
                            let d = pv[(po + i) * 3 + k] - gv[j * 3 + k];
                            gp[(po + i) * 3 + k] += wp * d;
                            gq[j * 3 + k] -= wp * d;
                        }
                    }
                    let wq = 2.0 * scale / ch.n_gt as f64;
                    for j in 0..ch.n_gt {
                        let i = po + ch.gt_to_pred[qo + j];
                        for k in 0..3 {
                            let d = gv[(qo + j) * 3 + k] - pv[i * 3 + k];
                            gq[(qo + j) * 3 + k] += wq * d;
                            gp[i * 3 + k] -= wq * d;
                        }
                    }
                }
                if let Some(acc) = self.slot(grads, ch.pred) {
                    acc.iter_mut().zip(&gp).for_each(|(o, v)| *o += v);
                }
                if let Some(acc) = self.slot(grads, ch.gt) {
                    acc.iter_mut().zip(&gq).for_each(|(o, v)| *o += v);
                }
            }
        }
    }

    /// Zero-initialised gradient buffer for `id`, or `None` if it needs none.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn as_points(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)`, switching to the identity branch above 30.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
