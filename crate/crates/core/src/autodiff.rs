//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Graph`] appends a node holding its output value and
//! enough saved state to compute its vector-Jacobian product. [`Graph::backward`]
//! replays the tape in exact reverse recording order, so inputs always precede
//! their consumers and gradients of shared nodes accumulate before they are
//! propagated further.
//!
//! A graph is single-threaded and owns all of its values. Independent graphs
//! share nothing and can run on separate threads.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Operation tag of a recorded node, for structural inspection of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Scale,
    MatMul,
    Transpose,
    Reduce(ReduceOp),
    Reshape,
    BroadcastTo,
    Concat,
    Narrow,
    Squash,
    Softmax,
    CapsulePredict,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reduce {
        input: Var,
        op: ReduceOp,
        axis: Option<usize>,
        // Flat input index chosen for each output element (max only).
        argmax: Vec<usize>,
    },
    Reshape(Var),
    BroadcastTo(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Squash(Var),
    Softmax(Var),
    CapsulePredict {
        weights: Var,
        input: Var,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reduce { op, .. } => OpKind::Reduce(*op),
            Op::Reshape(_) => OpKind::Reshape,
            Op::BroadcastTo(_) => OpKind::BroadcastTo,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Squash(_) => OpKind::Squash,
            Op::Softmax(_) => OpKind::Softmax,
            Op::CapsulePredict { .. } => OpKind::CapsulePredict,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    pub fn contains_op(&self, kind: OpKind) -> bool {
        self.op_kinds().any(|k| k == kind)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let ia = broadcast_index_map(ta.shape(), &shape);
        let ib = broadcast_index_map(tb.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::shape(format!("cannot multiply {sa:?} by {sb:?}")));
            }
        };
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let &[rows, cols] = ta.shape() else {
            return Err(Error::shape(format!("transpose needs a matrix, got {:?}", ta.shape())));
        };
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = ta.data()[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    // ---- reductions --------------------------------------------------------

    /// Reduces over `axis`, or over every element when `axis` is `None`
    /// (yielding shape `[1]`). With `keepdim` the reduced axis stays as size 1.
    pub fn reduce(&mut self, a: Var, op: ReduceOp, axis: Option<usize>, keepdim: bool) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let (outer, n, inner, out_shape) = match axis {
            None => (1, ta.numel(), 1, vec![1]),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::shape(format!(
                        "axis {ax} out of range for rank {}",
                        shape.len()
                    )));
                }
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                if keepdim {
                    out_shape[ax] = 1;
                } else {
                    out_shape.remove(ax);
                    if out_shape.is_empty() {
                        out_shape.push(1);
                    }
                }
                (outer, shape[ax], inner, out_shape)
            }
        };
        let data = ta.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let slot = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let s: f64 = (0..n).map(|j| data[at(j)]).sum();
                        out[slot] = if op == ReduceOp::Mean { s / n as f64 } else { s };
                    }
                    ReduceOp::Max => {
                        // Strict comparison keeps the first occurrence on ties.
                        let mut best = at(0);
                        for j in 1..n {
                            if data[at(j)] > data[best] {
                                best = at(j);
                            }
                        }
                        out[slot] = data[best];
                        argmax[slot] = best;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Reduce { input: a, op, axis, argmax }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, ReduceOp::Sum, None, false).expect("full reduction cannot fail")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, ReduceOp::Mean, None, false).expect("full reduction cannot fail")
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Expands `a` to `shape` by the trailing-dimension broadcasting rule.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if broadcast_shape(ta.shape(), shape)? != shape {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} to {shape:?}",
                ta.shape()
            )));
        }
        let map = broadcast_index_map(ta.shape(), shape);
        let data = map.iter().map(|&i| ta.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::BroadcastTo(a), &[a]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat needs at least one input"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "cannot concatenate {s:?} with {base:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow(axis {axis}, {start}..{}) out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&ta.data()[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Narrow { input: a, axis, start }, &[a]))
    }

    // ---- capsule primitives ------------------------------------------------

    /// Squashing nonlinearity applied to each vector along the last axis:
    /// `v = (|s|^2 / (1 + |s|^2)) * s / |s|`, with `v = 0` at `s = 0`.
    pub fn squash(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = *ta.shape().last().expect("non-empty shape");
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(d) {
            squash_in_place(chunk);
        }
        let value = Tensor::new(ta.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Squash(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = *ta.shape().last().expect("non-empty shape");
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(d) {
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in chunk.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in chunk.iter_mut() {
                *x /= total;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Capsule prediction vectors `u_hat[b, i, j] = W[i, j] · u[b, i]`.
    ///
    /// `weights` is `[n_in, n_out, d_out, d_in]`, `input` is `[batch, n_in, d_in]`,
    /// and the result is `[batch, n_in, n_out, d_out]`.
    pub fn capsule_predict(&mut self, weights: Var, input: Var) -> Result<Var> {
        let (tw, tu) = (self.value(weights), self.value(input));
        let (n_in, n_out, d_out, d_in, batch) = match (tw.shape(), tu.shape()) {
            (&[ni, no, dout, din], &[b, ni2, din2]) if ni == ni2 && din == din2 => {
                (ni, no, dout, din, b)
            }
            (sw, su) => {
                return Err(Error::shape(format!(
                    "capsule weights {sw:?} do not match input capsules {su:?}"
                )));
            }
        };
        let (w, u) = (tw.data(), tu.data());
        let wt = transpose_capsule_blocks(w, n_in, n_out * d_out, d_in);
        let cols = n_out * d_out;
        let mut out = vec![0.0; batch * n_in * cols];
        for b in 0..batch {
            for i in 0..n_in {
                let ui = &u[(b * n_in + i) * d_in..][..d_in];
                let row = &mut out[(b * n_in + i) * cols..][..cols];
                for (k, &x) in ui.iter().enumerate() {
                    axpy(x, &wt[(i * d_in + k) * cols..][..cols], row);
                }
            }
        }
        let value = Tensor::new(vec![batch, n_in, n_out, d_out], out)?;
        Ok(self.push(value, Op::CapsulePredict { weights, input }, &[weights, input]))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node that depends on
    /// a parameter leaf. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf, &self.nodes);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Temporarily move the op out so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out_shape = self.nodes[id].value.shape().to_vec();
                self.accumulate_broadcast(*a, &out_shape, g, |_, gi| gi);
                self.accumulate_broadcast(*b, &out_shape, g, |_, gi| sign * gi);
            }
            Op::Mul(a, b) => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                self.accumulate_product(*a, *b, &out_shape, g);
                self.accumulate_product(*b, *a, &out_shape, g);
            }
            Op::Sigmoid(a) => {
                self.accumulate(*a, |buf, nodes| {
                    let y = nodes[id].value.data();
                    for ((acc, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *acc += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(*a, |buf, nodes| {
                    let y = nodes[id].value.data();
                    for ((acc, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *acc += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(*a, |buf, _| {
                    for (acc, &gi) in buf.iter_mut().zip(g) {
                        *acc += gi * factor;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (a, b) = (*a, *b);
                // grad_a = g · bᵀ
                self.accumulate(a, |buf, nodes| {
                    let bd = nodes[b.0].value.data();
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            buf[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // grad_b = aᵀ · g
                self.accumulate(b, |buf, nodes| {
                    let ad = nodes[a.0].value.data();
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (acc, &gj) in buf[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *acc += aip * gj;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(*a, |buf, _| {
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Reduce {
                input,
                op: reduce_op,
                axis,
                argmax,
            } => {
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = match axis {
                    None => (1, shape.iter().product(), 1),
                    Some(ax) => (
                        shape[..*ax].iter().product(),
                        shape[*ax],
                        shape[*ax + 1..].iter().product(),
                    ),
                };
                self.accumulate(*input, |buf, _| match reduce_op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let w = if *reduce_op == ReduceOp::Mean { 1.0 / n as f64 } else { 1.0 };
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    buf[(o * n + j) * inner + i] += w * g[o * inner + i];
                                }
                            }
                        }
                    }
                    ReduceOp::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            buf[src] += g[slot];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(*a, |buf, _| {
                    for (acc, &gi) in buf.iter_mut().zip(g) {
                        *acc += gi;
                    }
                });
            }
            Op::BroadcastTo(a) => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                self.accumulate_broadcast(*a, &out_shape, g, |_, gi| gi);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in inputs {
                    let len = self.shape(p)[*axis];
                    self.accumulate(p, |buf, _| {
                        let chunk = len * inner;
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (acc, &gi) in buf[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[src..src + chunk])
                            {
                                *acc += gi;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let len = self.nodes[id].value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let n = in_shape[*axis];
                self.accumulate(*input, |buf, _| {
                    let chunk = len * inner;
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        for (acc, &gi) in buf[dst..dst + chunk]
                            .iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                        {
                            *acc += gi;
                        }
                    }
                });
            }
            Op::Squash(a) => {
                let d = *self.shape(*a).last().expect("non-empty shape");
                let a = *a;
                self.accumulate(a, |buf, nodes| {
                    let s = nodes[a.0].value.data();
                    for ((acc, si), gi) in buf.chunks_mut(d).zip(s.chunks(d)).zip(g.chunks(d)) {
                        squash_backward(si, gi, acc);
                    }
                });
            }
            Op::Softmax(a) => {
                let d = *self.shape(*a).last().expect("non-empty shape");
                self.accumulate(*a, |buf, nodes| {
                    let y = nodes[id].value.data();
                    for ((acc, yi), gi) in buf.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: f64 = yi.iter().zip(gi).map(|(y, g)| y * g).sum();
                        for k in 0..d {
                            acc[k] += yi[k] * (gi[k] - dot);
                        }
                    }
                });
            }
            Op::CapsulePredict { weights, input } => {
                let (w, u) = (*weights, *input);
                let ws = self.shape(w).to_vec();
                let (n_in, cols, d_in) = (ws[0], ws[1] * ws[2], ws[3]);
                let batch = self.shape(u)[0];
                self.accumulate(w, |buf, nodes| {
                    let ud = nodes[u.0].value.data();
                    // Accumulate in [i, k, (j, o)] layout, then transpose back.
                    let mut gt = vec![0.0; n_in * d_in * cols];
                    for b in 0..batch {
                        for i in 0..n_in {
                            let gi = &g[(b * n_in + i) * cols..][..cols];
                            for (k, &x) in ud[(b * n_in + i) * d_in..][..d_in].iter().enumerate() {
                                axpy(x, gi, &mut gt[(i * d_in + k) * cols..][..cols]);
                            }
                        }
                    }
                    for i in 0..n_in {
                        for k in 0..d_in {
                            let src = &gt[(i * d_in + k) * cols..][..cols];
                            for (jo, &v) in src.iter().enumerate() {
                                buf[(i * cols + jo) * d_in + k] += v;
                            }
                        }
                    }
                });
                self.accumulate(u, |buf, nodes| {
                    let wd = nodes[w.0].value.data();
                    for b in 0..batch {
                        for i in 0..n_in {
                            let acc = &mut buf[(b * n_in + i) * d_in..][..d_in];
                            let gi = &g[(b * n_in + i) * cols..][..cols];
                            for (jo, &go) in gi.iter().enumerate() {
                                axpy(go, &wd[(i * cols + jo) * d_in..][..d_in], acc);
                            }
                        }
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }

    /// Gradient of `target` in `target * other`, broadcast-aware.
    fn accumulate_product(&mut self, target: Var, other: Var, out_shape: &[usize], g: &[f64]) {
        let index_map = |shape: &[usize]| (shape != out_shape).then(|| broadcast_index_map(shape, out_shape));
        let target_map = index_map(self.shape(target));
        let other_map = index_map(self.shape(other));
        self.accumulate(target, |buf, nodes| {
            let od = nodes[other.0].value.data();
            for (o, &gi) in g.iter().enumerate() {
                let ti = target_map.as_ref().map_or(o, |m| m[o]);
                let oi = other_map.as_ref().map_or(o, |m| m[o]);
                buf[ti] += gi * od[oi];
            }
        });
    }

    /// Adds `f(out_index, g[out_index])` into the operand's gradient, summing
    /// over axes along which the operand was broadcast.
    fn accumulate_broadcast(
        &mut self,
        v: Var,
        out_shape: &[usize],
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let same = self.shape(v) == out_shape;
        let map = if same {
            Vec::new()
        } else {
            broadcast_index_map(self.shape(v), out_shape)
        };
        self.accumulate(v, |buf, _| {
            if same {
                for (o, (acc, &gi)) in buf.iter_mut().zip(g).enumerate() {
                    *acc += f(o, gi);
                }
            } else {
                for (o, &gi) in g.iter().enumerate() {
                    buf[map[o]] += f(o, gi);
                }
            }
        });
    }
}

/// `y += a * x`
#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `[n, rows, cols]` blocks to `[n, cols, rows]`.
fn transpose_capsule_blocks(w: &[f64], n: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for b in 0..n {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = w[base + r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

/// In-place squash of a single vector.
pub fn squash_in_place(s: &mut [f64]) {
    let sq: f64 = s.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return;
    }
    let norm = sq.sqrt();
    let factor = norm / (1.0 + sq);
    for x in s.iter_mut() {
        *x *= factor;
    }
}

// v = s * k(n) with k(n) = n / (1 + n^2), so
// dv/ds = k I + (k'(n) / n) s sᵀ and k'(n) = (1 - n^2) / (1 + n^2)^2.
fn squash_backward(s: &[f64], g: &[f64], acc: &mut [f64]) {
    let sq: f64 = s.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        // The Jacobian vanishes at the origin.
        return;
    }
    let n = sq.sqrt();
    let k = n / (1.0 + sq);
    let dk_over_n = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq) * n);
    let sg: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((a, &si), &gi) in acc.iter_mut().zip(s).zip(g) {
        *a += k * gi + dk_over_n * sg * si;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let sg = g.sigmoid(z);
        assert_eq!(g.value(sg).data(), &[0.5]);
        let th = g.tanh(z);
        assert_eq!(g.value(th).data(), &[0.0]);
        let a = g.constant(Tensor::vector(&[1.0, 2.0]));
        let b = g.constant(Tensor::vector(&[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcasting_add_and_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(Tensor::vector(&[10., 20., 30.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11., 22., 33., 14., 25., 36.]);
        let bad = g.constant(Tensor::vector(&[1., 2.]));
        assert!(matches!(g.add(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_gradient_is_sum_reduced() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.param(Tensor::vector(&[1., 1., 1.]));
        let c = g.mul(a, b).unwrap();
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[5., 7., 9.]);
        assert_eq!(g.grad(a).unwrap(), &[1.; 6]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let col = g.constant(t(&[2, 1], &[1., 2.]));
        let p = g.matmul(eye, col).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2.]);
        let row = g.constant(t(&[1, 2], &[1., 2.]));
        let col2 = g.constant(t(&[2, 1], &[3., 4.]));
        let q = g.matmul(row, col2).unwrap();
        assert_eq!(g.value(q).data(), &[11.]);
        assert!(g.matmul(row, row).is_err());
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1., 2., 3.]));
        let s = g.sum(a);
        assert_eq!(g.value(s).data(), &[6.]);
        let b = g.constant(Tensor::vector(&[2., 4.]));
        let m = g.mean(b);
        assert_eq!(g.value(m).data(), &[3.]);
        let mat = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let rows = g.reduce(mat, ReduceOp::Sum, Some(1), false).unwrap();
        assert_eq!(g.shape(rows), &[2]);
        assert_eq!(g.value(rows).data(), &[6., 15.]);
        let cols = g.reduce(mat, ReduceOp::Max, Some(0), true).unwrap();
        assert_eq!(g.shape(cols), &[1, 3]);
        assert_eq!(g.value(cols).data(), &[4., 5., 6.]);
        assert!(g.reduce(mat, ReduceOp::Sum, Some(2), false).is_err());
    }

    #[test]
    fn max_ties_route_gradient_to_first_occurrence() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(&[1., 3., 3.]));
        let m = g.reduce(a, ReduceOp::Max, None, false).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0., 1., 0.]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(&[0.5, -1.0, 2.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.param(Tensor::vector(&[0.5, -1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_use_accumulates_both_paths() {
        // loss = sum(2w) + sum(tanh(w)): the single-path gradients are
        // 2 and (1 - tanh^2) respectively.
        let data = [0.3, -0.7];
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(&data));
        let a = g.scale(w, 2.0);
        let b = g.tanh(w);
        let c = g.add(a, b).unwrap();
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        let got = g.grad(w).unwrap();
        for (k, x) in data.iter().enumerate() {
            let want = 2.0 + (1.0 - x.tanh().powi(2));
            assert!((got[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 1], &[1., 2.]));
        let b = g.param(t(&[2, 1], &[3., 4.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 2., 4.]);
        let back = g.narrow(c, 1, 1, 1).unwrap();
        assert_eq!(g.value(back).data(), &[3., 4.]);
        let loss = g.sum(back);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0., 0.]);
        assert_eq!(g.grad(b).unwrap(), &[1., 1.]);
        let mismatched = g.param(t(&[3, 1], &[0., 0., 0.]));
        assert!(g.concat(&[a, mismatched], 1).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(&[1.0, 2.0]));
        let w = g.param(Tensor::vector(&[3.0, 4.0]));
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0., 0., 0., 1., 2., 3.]));
        let s = g.softmax(a);
        let v = g.value(s);
        assert!((v.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        for row in v.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
