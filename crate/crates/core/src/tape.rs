//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node holding its output value. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Binary elementwise ops broadcast over the two-dimensional view of their
//! operands (a `1×n` row, an `m×1` column or a `1×1` scalar stretch to
//! the other operand's shape).

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dims2, gemm_acc, gemm_nt_acc, gemm_tn_acc, split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Unary(UnaryKind, Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Bce {
        m: Var,
        /// d loss / d m, precomputed in the forward pass.
        dm: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Every `requires_grad` leaf
    /// recorded before the loss has an entry, zero if it did not participate.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Broadcast shape of two operands in the 2D view.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if a == b {
        let (r, c) = dims2(a)?;
        return Ok((a.to_vec(), r, c));
    }
    let (ra, ca) = dims2(a)?;
    let (rb, cb) = dims2(b)?;
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(ra, rb), dim(ca, cb)) {
        (Some(r), Some(c)) => {
            let shape = if (r, c) == (ra, ca) {
                a.to_vec()
            } else if (r, c) == (rb, cb) {
                b.to_vec()
            } else {
                vec![r, c]
            };
            Ok((shape, r, c))
        }
        _ => Err(Error::dim(op, a, b)),
    }
}

/// Index into an operand of dims `(r, c)` for output position `(i, j)`.
#[inline]
fn bidx(r: usize, c: usize, i: usize, j: usize) -> usize {
    let i = if r == 1 { 0 } else { i };
    let j = if c == 1 { 0 } else { j };
    i * c + j
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Relu => |v| v.max(0.0),
        };
        let out = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, r, c) = broadcast("elementwise", va.shape(), vb.shape())?;
        let (ra, ca) = va.dims2()?;
        let (rb, cb) = vb.dims2()?;
        let (da, db) = (va.data(), vb.data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = da[bidx(ra, ca, i, j)];
                let y = db[bidx(rb, cb, i, j)];
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                });
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = split_axis(v.shape(), axis, "softmax")?;
        if len == 0 {
            return Err(Error::dim("softmax (empty axis)", v.shape(), &[axis]));
        }
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| d[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (d[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Reduction along `axis`, keeping the axis with length 1.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = split_axis(v.shape(), axis, "reduce")?;
        if len == 0 && kind != ReduceKind::Sum {
            return Err(Error::dim("reduce (empty axis)", v.shape(), &[axis]));
        }
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let slot = o * inner + j;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..len).map(|i| d[at(i)]).sum();
                        out[slot] = if kind == ReduceKind::Mean {
                            s / len as f64
                        } else {
                            s
                        };
                    }
                    ReduceKind::Max => {
                        // strict `>` keeps the lowest index on ties
                        let mut best = 0;
                        for i in 1..len {
                            if d[at(i)] > d[at(best)] {
                                best = i;
                            }
                        }
                        out[slot] = d[at(best)];
                        argmax[slot] = at(best);
                    }
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            t,
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Concatenates along `axis`. Parts with no elements are skipped.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<Var> = parts
            .iter()
            .copied()
            .filter(|&p| !self.value(p).is_empty())
            .collect();
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of no non-empty parts".into()));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let base = self.value(first).shape().to_vec();
        let mut total = 0;
        for &p in &parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && axis < s.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis, "concat")?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in &parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts, axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = split_axis(v.shape(), axis, "slice")?;
        if range.start > range.end || range.end > len {
            return Err(Error::dim("slice", v.shape(), &[range.start, range.end]));
        }
        let width = range.end - range.start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * len + range.start) * inner;
            out.extend_from_slice(&v.data()[from..from + width * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = width;
        let rg = self.requires_grad(x);
        let op = Op::Slice {
            x,
            axis,
            start: range.start,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Row `i` of the output is row `index[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = match v.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::dim("gather_rows", s, &[])),
        };
        let mut out = vec![0.0; index.len() * c];
        for (i, src) in index.iter().enumerate() {
            if let Some(src) = *src {
                if src >= r {
                    return Err(Error::dim("gather_rows", v.shape(), &[src]));
                }
                out[i * c..(i + 1) * c].copy_from_slice(v.row(src));
            }
        }
        let rg = self.requires_grad(x);
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        Ok(self.push(Tensor::matrix(index.len(), c, out)?, op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row-wise layer normalization of a `T×D` matrix followed by the affine
    /// `gain`/`bias` (each of length `D`). A row whose variance plus `eps` is
    /// zero normalizes to zeros, so its output is `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let (t, d) = match v.shape() {
            [t, d] => (*t, *d),
            s => return Err(Error::dim("layer_norm", s, &[])),
        };
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(Error::dim("layer_norm", v.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let is = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let rg = [x, gain, bias].iter().any(|&p| self.requires_grad(p));
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::matrix(t, d, out)?, op, rg))
    }

    /// Inverted dropout. Identity when not training or when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Mask { x, mask }, rg))
    }

    /// Max over consecutive row windows of `window` rows; the final window may
    /// be short when `window` does not divide the row count.
    pub fn max_pool_rows(&mut self, x: Var, window: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = match v.shape() {
            [r, c] if *r > 0 => (*r, *c),
            s => return Err(Error::dim("max_pool_rows", s, &[window])),
        };
        if window == 0 {
            return Err(Error::Config("max-pool window must be >= 1".into()));
        }
        let k = r.div_ceil(window);
        let d = v.data();
        let mut out = vec![0.0; k * c];
        let mut argmax = vec![0; k * c];
        for s in 0..k {
            let rows = s * window..((s + 1) * window).min(r);
            for j in 0..c {
                let mut best = rows.start * c + j;
                for i in rows.clone().skip(1) {
                    if d[i * c + j] > d[best] {
                        best = i * c + j;
                    }
                }
                out[s * c + j] = d[best];
                argmax[s * c + j] = best;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::matrix(k, c, out)?, Op::MaxPoolRows { x, argmax }, rg))
    }

    /// Mean binary cross-entropy between probabilities `m` and soft targets.
    /// Probabilities are clamped to `[eps, 1 - eps]` before the logs; cells
    /// where `include` is false are left out of both sum and count.
    pub fn bce(&mut self, m: Var, target: &Tensor, include: Option<&[bool]>, eps: f64) -> Result<Var> {
        let v = self.value(m);
        if v.shape() != target.shape() {
            return Err(Error::dim("bce", v.shape(), target.shape()));
        }
        if let Some(mask) = include {
            if mask.len() != v.len() {
                return Err(Error::dim("bce mask", v.shape(), &[mask.len()]));
            }
        }
        let used = |i: usize| include.is_none_or(|mask| mask[i]);
        let count = (0..v.len()).filter(|&i| used(i)).count();
        if count == 0 {
            return Err(Error::Contract("bce over zero cells".into()));
        }
        let inv = 1.0 / count as f64;
        let mut loss = 0.0;
        let mut dm = vec![0.0; v.len()];
        for (i, (&p, &o)) in v.data().iter().zip(target.data()).enumerate() {
            if !used(i) {
                continue;
            }
            let pc = p.clamp(eps, 1.0 - eps);
            loss -= o * pc.ln() + (1.0 - o) * (1.0 - pc).ln();
            if p > eps && p < 1.0 - eps {
                dm[i] = -inv * (o / pc - (1.0 - o) / (1.0 - pc));
            }
        }
        let rg = self.requires_grad(m);
        Ok(self.push(Tensor::scalar(loss * inv), Op::Bce { m, dm }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let shaped = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2()?;
                let n = vb.cols();
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), vb.data(), &mut da, m, n, k);
                    accumulate(grads, *a, shaped(*a, da)?);
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(va.data(), g.data(), &mut db, m, k, n);
                    accumulate(grads, *b, shaped(*b, db)?);
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose()?;
                accumulate(grads, *x, shaped(*x, gt.into_data())?);
            }
            Op::Unary(kind, x) => {
                let y = node.value.data();
                let xv = self.value(*x).data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| match kind {
                        UnaryKind::Sigmoid => gi * y[i] * (1.0 - y[i]),
                        UnaryKind::Tanh => gi * (1.0 - y[i] * y[i]),
                        UnaryKind::Relu => {
                            if xv[i] > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                accumulate(grads, *x, shaped(*x, d)?);
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ra, ca) = va.dims2()?;
                let (rb, cb) = vb.dims2()?;
                let (r, c) = g.dims2()?;
                let mut da = if rg(*a) { Some(vec![0.0; va.len()]) } else { None };
                let mut db = if rg(*b) { Some(vec![0.0; vb.len()]) } else { None };
                for i in 0..r {
                    for j in 0..c {
                        let gi = g.data()[i * c + j];
                        let ia = bidx(ra, ca, i, j);
                        let ib = bidx(rb, cb, i, j);
                        let (ga, gb) = match kind {
                            BinaryKind::Add => (gi, gi),
                            BinaryKind::Sub => (gi, -gi),
                            BinaryKind::Mul => (gi * vb.data()[ib], gi * va.data()[ia]),
                        };
                        if let Some(da) = &mut da {
                            da[ia] += ga;
                        }
                        if let Some(db) = &mut db {
                            db[ib] += gb;
                        }
                    }
                }
                if let Some(da) = da {
                    accumulate(grads, *a, shaped(*a, da)?);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, shaped(*b, db)?);
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis, "softmax")?;
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| gd[at(i)] * yd[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, shaped(*x, dx)?);
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let xv = self.value(*x);
                let (outer, len, inner) = split_axis(xv.shape(), *axis, "reduce")?;
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let slot = o * inner + j;
                        let gi = g.data()[slot];
                        match kind {
                            ReduceKind::Max => dx[argmax[slot]] += gi,
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let w = if *kind == ReduceKind::Mean {
                                    gi / len as f64
                                } else {
                                    gi
                                };
                                for i in 0..len {
                                    dx[(o * len + i) * inner + j] += w;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, shaped(*x, dx)?);
            }
            Op::SumAll(x) => {
                let gi = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gi));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis, "concat")?;
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).shape()[*axis];
                    if rg(p) {
                        let mut dp = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            dp.extend_from_slice(&g.data()[from..from + width * inner]);
                        }
                        accumulate(grads, p, shaped(p, dp)?);
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, len, inner) = split_axis(xv.shape(), *axis, "slice")?;
                let width = node.value.shape()[*axis];
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    let to = (o * len + start) * inner;
                    let from = o * width * inner;
                    dx[to..to + width * inner].copy_from_slice(&g.data()[from..from + width * inner]);
                }
                accumulate(grads, *x, shaped(*x, dx)?);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (i, src) in index.iter().enumerate() {
                    if let Some(src) = *src {
                        for (d, gi) in dx[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&g.data()[i * c..(i + 1) * c])
                        {
                            *d += gi;
                        }
                    }
                }
                accumulate(grads, *x, shaped(*x, dx)?);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, shaped(*x, g.data().to_vec())?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (t, d) = node.value.dims2()?;
                let gv = self.value(*gain).data();
                let gd = g.data();
                if rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..t {
                        for c in 0..d {
                            dg[c] += gd[r * d + c] * xhat[r * d + c];
                        }
                    }
                    accumulate(grads, *gain, shaped(*gain, dg)?);
                }
                if rg(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..t {
                        for c in 0..d {
                            db[c] += gd[r * d + c];
                        }
                    }
                    accumulate(grads, *bias, shaped(*bias, db)?);
                }
                if rg(*x) {
                    let mut dx = vec![0.0; t * d];
                    let df = d as f64;
                    for r in 0..t {
                        let row = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = gd[row.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] = inv_std[r] / df * (df * dxhat[c] - s1 - xhat[r * d + c] * s2);
                        }
                    }
                    accumulate(grads, *x, shaped(*x, dx)?);
                }
            }
            Op::Mask { x, mask } => {
                let dx: Vec<f64> = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *x, shaped(*x, dx)?);
            }
            Op::MaxPoolRows { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gi, &src) in g.data().iter().zip(argmax) {
                    dx[src] += gi;
                }
                accumulate(grads, *x, shaped(*x, dx)?);
            }
            Op::Bce { m, dm } => {
                let gi = g.data()[0];
                accumulate(grads, *m, shaped(*m, dm.iter().map(|d| d * gi).collect())?);
            }
        }
        Ok(())
    }
}
