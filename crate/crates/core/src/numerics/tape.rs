use std::cell::RefCell;

use super::gemm::gemm;
use super::{NumericsError, ParamId, ParamStore, Result, Tensor};

type NodeId = usize;

/// Recorded operation. Ids always refer to earlier nodes.
#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    AddScalar {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    Square {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Select {
        x: NodeId,
        axis: usize,
        indices: Vec<usize>,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
    Softmax {
        x: NodeId,
        scale_dim: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is single-threaded; independent tapes may live on different
/// threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Parameter leaves of one store recorded on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.index()]
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or zeros when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.get_id(var.id)
    }

    fn get_id(&self, id: NodeId) -> Tensor {
        let shape = &self.shapes[id];
        match &self.grads[id] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NumericFault { op })
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-wise `softmax(x / sqrt(scale_dim))` over rows of width `cols`.
pub fn softmax_scaled_rows(input: &[f64], cols: usize, scale_dim: usize, out: &mut [f64]) {
    let inv = 1.0 / (scale_dim as f64).sqrt();
    for (row, orow) in input.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = ((v - max) * inv).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let suffix_ok = long.ends_with(short);
    let scalar = short.iter().product::<usize>() == 1;
    if suffix_ok || scalar {
        Ok(long.to_vec())
    } else {
        Err(NumericsError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a parameter leaf whose gradient [`Tape::backward_into`] writes
    /// back into `store`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) }, true)
    }

    /// Records every parameter of `store` once.
    pub fn bind(&self, store: &ParamStore) -> BoundParams<'_> {
        BoundParams {
            tape: self,
            vars: store.ids().map(|id| self.param(store, id)).collect(),
        }
    }

    /// Drops every recorded node.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Reverse pass from a single-element `loss`. Clears the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        backward_nodes(&nodes, loss.id)
    }

    /// Reverse pass that accumulates parameter gradients into `store`.
    ///
    /// Parameters the loss does not reach receive zero gradients. Clears the
    /// tape.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let grads = backward_nodes(&nodes, loss.id)?;
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.len()]);
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &grads.grads[i] {
                    let dst = store.get_mut(pid).grad.as_mut().expect("initialized above");
                    if dst.len() != g.len() {
                        return Err(NumericsError::InvalidState(format!(
                            "parameter {} changed shape while recorded",
                            pid.0
                        )));
                    }
                    for (d, v) in dst.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backward_nodes(nodes: &[Node], loss: NodeId) -> Result<Gradients> {
    if loss >= nodes.len() {
        return Err(NumericsError::InvalidState(
            "loss is not on the tape; a previous backward pass cleared it".into(),
        ));
    }
    if nodes[loss].value.len() != 1 {
        return Err(NumericsError::InvalidArgument(format!(
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss].value.shape()
        )));
    }
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[loss] = Some(vec![1.0]);
    for id in (0..=loss).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        propagate(nodes, id, &g, &mut grads);
        grads[id] = Some(g);
    }
    Ok(Gradients {
        shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        grads,
    })
}

/// Pushes the output gradient `g` of node `id` into its inputs.
fn propagate(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: NodeId| &nodes[i].value;
    let wants = |i: NodeId| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf { .. } => {}
        &Op::MatMul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let k = bv.shape()[0];
            let n = bv.shape()[1];
            let m = av.len() / k;
            if wants(a) {
                let da = acc(grads, a, av.len());
                // dA = G * B^T
                gemm(m, n, k, g, (n, 1), bv.data(), (1, n), 1.0, da);
            }
            if wants(b) {
                let db = acc(grads, b, bv.len());
                // dB = A^T * G
                gemm(k, m, n, av.data(), (1, k), g, (n, 1), 1.0, db);
            }
        }
        &Op::Affine { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let m = xv.len() / k;
            if wants(x) {
                let dx = acc(grads, x, xv.len());
                gemm(m, n, k, g, (n, 1), wv.data(), (1, n), 1.0, dx);
            }
            if wants(w) {
                let dw = acc(grads, w, wv.len());
                gemm(k, m, n, xv.data(), (1, k), g, (n, 1), 1.0, dw);
            }
            if wants(b) {
                let db = acc(grads, b, n);
                for row in g.chunks_exact(n) {
                    for (d, gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
            }
        }
        &Op::BatchMatMul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            if wants(a) {
                let da = acc(grads, a, av.len());
                for s in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[s * m * n..],
                        (n, 1),
                        &bv.data()[s * k * n..],
                        (1, n),
                        1.0,
                        &mut da[s * m * k..(s + 1) * m * k],
                    );
                }
            }
            if wants(b) {
                let db = acc(grads, b, bv.len());
                for s in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &av.data()[s * m * k..],
                        (1, k),
                        &g[s * m * n..],
                        (n, 1),
                        1.0,
                        &mut db[s * k * n..(s + 1) * k * n],
                    );
                }
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) {
                -1.0
            } else {
                1.0
            };
            for (input, s) in [(a, 1.0), (b, sign)] {
                if wants(input) {
                    let len = val(input).len();
                    let d = acc(grads, input, len);
                    for (i, gi) in g.iter().enumerate() {
                        d[i % len] += s * gi;
                    }
                }
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a).data(), val(b).data());
            let (la, lb) = (av.len(), bv.len());
            if wants(a) {
                let d = acc(grads, a, la);
                for (i, gi) in g.iter().enumerate() {
                    d[i % la] += gi * bv[i % lb];
                }
            }
            if wants(b) {
                let d = acc(grads, b, lb);
                for (i, gi) in g.iter().enumerate() {
                    d[i % lb] += gi * av[i % la];
                }
            }
        }
        &Op::Scale { x, factor } => {
            let d = acc(grads, x, g.len());
            for (di, gi) in d.iter_mut().zip(g) {
                *di += factor * gi;
            }
        }
        &Op::AddScalar { x } | &Op::Reshape { x } => {
            let d = acc(grads, x, g.len());
            for (di, gi) in d.iter_mut().zip(g) {
                *di += gi;
            }
        }
        &Op::Relu { x } => {
            let xv = val(x).data();
            let d = acc(grads, x, g.len());
            for ((di, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                if *xi > 0.0 {
                    *di += gi;
                }
            }
        }
        &Op::Tanh { x } => {
            let y = node.value.data();
            let d = acc(grads, x, g.len());
            for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                *di += gi * (1.0 - yi * yi);
            }
        }
        &Op::Sigmoid { x } => {
            let y = node.value.data();
            let d = acc(grads, x, g.len());
            for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                *di += gi * yi * (1.0 - yi);
            }
        }
        &Op::Abs { x } => {
            let xv = val(x).data();
            let d = acc(grads, x, g.len());
            for ((di, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                *di += gi * xi.signum() * f64::from(*xi != 0.0);
            }
        }
        &Op::Square { x } => {
            let xv = val(x).data();
            let d = acc(grads, x, g.len());
            for ((di, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                *di += 2.0 * gi * xi;
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, _, inner) = axis_extents(out_shape, *axis);
            let total = out_shape[*axis];
            let mut offset = 0;
            for &input in inputs {
                let dim = val(input).shape()[*axis];
                if wants(input) {
                    let d = acc(grads, input, val(input).len());
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                        let dst = &mut d[o * dim * inner..(o + 1) * dim * inner];
                        for (di, si) in dst.iter_mut().zip(src) {
                            *di += si;
                        }
                    }
                }
                offset += dim;
            }
        }
        &Op::Slice { x, axis, start } => {
            let in_shape = val(x).shape();
            let (outer, dim, inner) = axis_extents(in_shape, axis);
            let len = node.value.shape()[axis];
            let d = acc(grads, x, val(x).len());
            for o in 0..outer {
                let dst = &mut d[(o * dim + start) * inner..(o * dim + start + len) * inner];
                let src = &g[o * len * inner..(o + 1) * len * inner];
                for (di, si) in dst.iter_mut().zip(src) {
                    *di += si;
                }
            }
        }
        Op::Select { x, axis, indices } => {
            let (outer, dim, inner) = axis_extents(val(*x).shape(), *axis);
            let k = indices.len();
            let d = acc(grads, *x, val(*x).len());
            for o in 0..outer {
                for (j, &src_idx) in indices.iter().enumerate() {
                    let dst = &mut d[(o * dim + src_idx) * inner..(o * dim + src_idx + 1) * inner];
                    let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                    for (di, si) in dst.iter_mut().zip(src) {
                        *di += si;
                    }
                }
            }
        }
        &Op::Sum { x } | &Op::Mean { x } => {
            let len = val(x).len();
            let scale = if matches!(node.op, Op::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let d = acc(grads, x, len);
            for di in d.iter_mut() {
                *di += g[0] * scale;
            }
        }
        &Op::SumAxis { x, axis } | &Op::MeanAxis { x, axis } => {
            let (outer, dim, inner) = axis_extents(val(x).shape(), axis);
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                1.0 / dim as f64
            } else {
                1.0
            };
            let d = acc(grads, x, val(x).len());
            for o in 0..outer {
                for j in 0..dim {
                    for i in 0..inner {
                        d[(o * dim + j) * inner + i] += scale * g[o * inner + i];
                    }
                }
            }
        }
        Op::Gather { x, indices } => {
            let cols = val(*x).shape()[1];
            let d = acc(grads, *x, val(*x).len());
            for (r, &c) in indices.iter().enumerate() {
                d[r * cols + c] += g[r];
            }
        }
        &Op::Softmax { x, scale_dim } => {
            let y = node.value.data();
            let cols = *node.value.shape().last().unwrap();
            let inv = 1.0 / (scale_dim as f64).sqrt();
            let d = acc(grads, x, y.len());
            for ((yr, gr), dr) in y
                .chunks_exact(cols)
                .zip(g.chunks_exact(cols))
                .zip(d.chunks_exact_mut(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((di, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                    *di += inv * yi * (gi - dot);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let dim = val(*gain).len();
            let gv = val(*gain).data().to_vec();
            if wants(*gain) {
                let dg = acc(grads, *gain, dim);
                for (gr, xr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                    for ((d, gi), xi) in dg.iter_mut().zip(gr).zip(xr) {
                        *d += gi * xi;
                    }
                }
            }
            if wants(*bias) {
                let db = acc(grads, *bias, dim);
                for gr in g.chunks_exact(dim) {
                    for (d, gi) in db.iter_mut().zip(gr) {
                        *d += gi;
                    }
                }
            }
            if wants(*x) {
                let dx = acc(grads, *x, g.len());
                let n = dim as f64;
                let mut dxhat = vec![0.0; dim];
                for (row, ((gr, xr), dr)) in g
                    .chunks_exact(dim)
                    .zip(xhat.chunks_exact(dim))
                    .zip(dx.chunks_exact_mut(dim))
                    .enumerate()
                {
                    for ((dh, gi), gn) in dxhat.iter_mut().zip(gr).zip(&gv) {
                        *dh = gi * gn;
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let s = inv_std[row] / n;
                    for ((di, dh), xi) in dr.iter_mut().zip(&dxhat).zip(xr) {
                        *di += s * (n * dh - sum_d - xi * sum_dx);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => attention_backward(nodes, [*q, *k, *v], *heads, probs, g, grads),
    }
}

fn attention_backward(
    nodes: &[Node],
    [q, k, v]: [NodeId; 3],
    heads: usize,
    probs: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let shape = nodes[q].value.shape();
    let (seqs, tokens, width) = (shape[0], shape[1], shape[2]);
    let dh = width / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (
        nodes[q].value.data(),
        nodes[k].value.data(),
        nodes[v].value.data(),
    );
    let len = seqs * tokens * width;
    let mut dq = vec![0.0; len];
    let mut dk = vec![0.0; len];
    let mut dv = vec![0.0; len];
    let mut dp = vec![0.0; tokens * tokens];
    for s in 0..seqs {
        let base = s * tokens * width;
        for h in 0..heads {
            let p = &probs[(s * heads + h) * tokens * tokens..][..tokens * tokens];
            let col = h * dh;
            for i in 0..tokens {
                let gi = &g[base + i * width + col..][..dh];
                for j in 0..tokens {
                    let vj = &vv[base + j * width + col..][..dh];
                    dp[i * tokens + j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let pij = p[i * tokens + j];
                    let dvj = &mut dv[base + j * width + col..][..dh];
                    for (d, gv) in dvj.iter_mut().zip(gi) {
                        *d += pij * gv;
                    }
                }
            }
            for i in 0..tokens {
                let prow = &p[i * tokens..][..tokens];
                let drow = &dp[i * tokens..][..tokens];
                let dot: f64 = prow.iter().zip(drow).map(|(a, b)| a * b).sum();
                let qi = &qv[base + i * width + col..][..dh];
                for j in 0..tokens {
                    let dz = inv * prow[j] * (drow[j] - dot);
                    if dz == 0.0 {
                        continue;
                    }
                    let kj = &kv[base + j * width + col..][..dh];
                    let dqi = &mut dq[base + i * width + col..][..dh];
                    for (d, kx) in dqi.iter_mut().zip(kj) {
                        *d += dz * kx;
                    }
                    let dkj = &mut dk[base + j * width + col..][..dh];
                    for (d, qx) in dkj.iter_mut().zip(qi) {
                        *d += dz * qx;
                    }
                }
            }
        }
    }
    for (id, d) in [(q, dq), (k, dk), (v, dv)] {
        if nodes[id].requires_grad {
            let dst = acc(grads, id, len);
            for (a, b) in dst.iter_mut().zip(d) {
                *a += b;
            }
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the node's current value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        op_name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(NodeId) -> Op,
    ) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            let data = t.data().iter().map(|&v| f(v)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        });
        check_finite(op_name, &out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, op(self.id), rg))
    }

    fn binary(
        self,
        other: Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(op_name, a.shape(), b.shape())?;
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let (la, lb) = (ad.len(), bd.len());
            let data: Vec<f64> = if la == lb {
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            } else {
                (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect()
            };
            Tensor::new(shape, data).expect("broadcast shape")
        };
        check_finite(op_name, &out)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, op, rg))
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let err = || NumericsError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            if b.rank() != 2 || a.shape().last() != Some(&b.shape()[0]) {
                return Err(err());
            }
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.len() / k;
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut c);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, c).expect("matmul shape")
        };
        check_finite("matmul", &out)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// `x W + b` for `x: [..., k]`, `W: [k, n]`, `b: [n]`, fused into one node.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (x, wv, bv) = (
                &nodes[self.id].value,
                &nodes[w.id].value,
                &nodes[b.id].value,
            );
            if wv.rank() != 2
                || x.shape().last() != Some(&wv.shape()[0])
                || bv.len() != wv.shape()[1]
            {
                return Err(NumericsError::Shape {
                    op: "affine",
                    lhs: x.shape().to_vec(),
                    rhs: wv.shape().to_vec(),
                });
            }
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let m = x.len() / k;
            let mut c = Vec::with_capacity(m * n);
            for _ in 0..m {
                c.extend_from_slice(bv.data());
            }
            gemm(m, k, n, x.data(), (k, 1), wv.data(), (n, 1), 1.0, &mut c);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, c).expect("affine shape")
        };
        check_finite("affine", &out)?;
        let rg = self.tape.requires(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            out,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            rg,
        ))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(NumericsError::Shape {
                    op: "bmm",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut c = vec![0.0; batch * m * n];
            for s in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[s * m * k..],
                    (k, 1),
                    &b.data()[s * k * n..],
                    (n, 1),
                    0.0,
                    &mut c[s * m * n..(s + 1) * m * n],
                );
            }
            Tensor::new(vec![batch, m, n], c).expect("bmm shape")
        };
        check_finite("bmm", &out)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Add {
            a: self.id,
            b: other.id,
        };
        self.binary(other, "add", |a, b| a + b, op)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Sub {
            a: self.id,
            b: other.id,
        };
        self.binary(other, "sub", |a, b| a - b, op)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Mul {
            a: self.id,
            b: other.id,
        };
        self.binary(other, "mul", |a, b| a * b, op)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| v * factor, |x| Op::Scale { x, factor })
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + c, |x| Op::AddScalar { x })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |x| Op::Tanh { x })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(
            "sigmoid",
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |x| Op::Sigmoid { x },
        )
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, |x| Op::Abs { x })
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |v| v * v, |x| Op::Square { x })
    }

    /// Elementwise `(self - target)^2`.
    pub fn squared_error(self, target: Var<'t>) -> Result<Var<'t>> {
        self.sub(target)?.square()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Reshape { x: self.id }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::InvalidArgument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(NumericsError::InvalidArgument(format!(
                    "concat axis {axis} out of range for {base:?}"
                )));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(NumericsError::Shape {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_extents(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let dim = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * dim * inner..(o + 1) * dim * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data).expect("concat shape")
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(out, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Range `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            let shape = t.shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(NumericsError::InvalidArgument(format!(
                    "slice {start}..{} on axis {axis} of {shape:?}",
                    start + len
                )));
            }
            let (outer, dim, inner) = axis_extents(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(
                    &t.data()[(o * dim + start) * inner..(o * dim + start + len) * inner],
                );
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            Ok(Tensor::new(s, data).expect("slice shape"))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Picks `indices` (repeats allowed) along `axis`.
    pub fn select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            let shape = t.shape();
            if axis >= shape.len()
                || indices.is_empty()
                || indices.iter().any(|&i| i >= shape[axis])
            {
                return Err(NumericsError::InvalidArgument(format!(
                    "select {indices:?} on axis {axis} of {shape:?}"
                )));
            }
            let (outer, dim, inner) = axis_extents(shape, axis);
            let mut data = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in indices {
                    data.extend_from_slice(
                        &t.data()[(o * dim + i) * inner..(o * dim + i + 1) * inner],
                    );
                }
            }
            let mut s = shape.to_vec();
            s[axis] = indices.len();
            Ok(Tensor::new(s, data).expect("select shape"))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Select {
                x: self.id,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.with_value(|t| t.data().iter().sum::<f64>());
        let out = Tensor::scalar(total);
        check_finite("sum", &out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Sum { x: self.id }, rg))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let m = self.with_value(|t| t.data().iter().sum::<f64>() / t.len() as f64);
        let out = Tensor::scalar(m);
        check_finite("mean", &out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Mean { x: self.id }, rg))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(NumericsError::InvalidArgument(format!(
                    "reduce axis {axis} out of range for {shape:?}"
                )));
            }
            let (outer, dim, inner) = axis_extents(shape, axis);
            let scale = if mean { 1.0 / dim as f64 } else { 1.0 };
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..dim {
                    let src = &t.data()[(o * dim + j) * inner..][..inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            data.iter_mut().for_each(|v| *v *= scale);
            let mut s: Vec<usize> = shape.to_vec();
            s.remove(axis);
            if s.is_empty() {
                s.push(1);
            }
            Ok(Tensor::new(s, data).expect("reduce shape"))
        })?;
        let rg = self.requires_grad();
        let op = if mean {
            Op::MeanAxis { x: self.id, axis }
        } else {
            Op::SumAxis { x: self.id, axis }
        };
        Ok(self.tape.push(out, op, rg))
    }

    /// Sums out `axis`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// `out[r] = self[r, indices[r]]` for a `[rows, cols]` tensor.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            let shape = t.shape();
            if shape.len() != 2 || shape[0] != indices.len() {
                return Err(NumericsError::Shape {
                    op: "gather",
                    lhs: shape.to_vec(),
                    rhs: vec![indices.len()],
                });
            }
            if indices.iter().any(|&c| c >= shape[1]) {
                return Err(NumericsError::InvalidArgument(
                    "gather index out of range".into(),
                ));
            }
            let data = indices
                .iter()
                .enumerate()
                .map(|(r, &c)| t.data()[r * shape[1] + c])
                .collect();
            Ok(Tensor::new(vec![indices.len()], data).expect("gather shape"))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Gather {
                x: self.id,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `softmax(x / sqrt(scale_dim))` over the last axis.
    pub fn softmax_scaled(self, scale_dim: usize) -> Result<Var<'t>> {
        if scale_dim == 0 {
            return Err(NumericsError::InvalidArgument(
                "softmax scale_dim must be positive".into(),
            ));
        }
        let out = self.with_value(|t| {
            let cols = *t.shape().last().unwrap();
            let mut data = vec![0.0; t.len()];
            softmax_scaled_rows(t.data(), cols, scale_dim, &mut data);
            Tensor::new(t.shape().to_vec(), data).expect("softmax shape")
        });
        check_finite("softmax_scaled", &out)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Softmax {
                x: self.id,
                scale_dim,
            },
            rg,
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    ///
    /// A constant row normalizes to zero, so its output equals `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (
                &nodes[self.id].value,
                &nodes[gain.id].value,
                &nodes[bias.id].value,
            );
            let dim = *x.shape().last().unwrap();
            if g.shape() != [dim] || b.shape() != [dim] {
                return Err(NumericsError::Shape {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rows = x.len() / dim;
            let mut xhat = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.data()[r * dim..(r + 1) * dim];
                let mean = row.iter().sum::<f64>() / dim as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..dim {
                    let h = (row[c] - mean) * is;
                    xhat[r * dim + c] = h;
                    out[r * dim + c] = g.data()[c] * h + b.data()[c];
                }
            }
            (
                Tensor::new(x.shape().to_vec(), out).expect("layer_norm shape"),
                xhat,
                inv_std,
            )
        };
        check_finite("layer_norm", &out)?;
        let rg = self.tape.requires(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[seqs, tokens, heads * head_dim]`; each head uses
    /// `softmax_scaled` with `scale_dim = head_dim`. Returns the mixed values
    /// and the attention weights laid out `[seqs, heads, tokens, tokens]`.
    pub fn attention(
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
    ) -> Result<(Var<'t>, Tensor)> {
        let tape = q.tape;
        let (out, probs, shape) = {
            let nodes = tape.nodes.borrow();
            let (qt, kt, vt) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value);
            let shape = qt.shape().to_vec();
            if shape.len() != 3 || kt.shape() != shape || vt.shape() != shape {
                return Err(NumericsError::Shape {
                    op: "attention",
                    lhs: shape,
                    rhs: kt.shape().to_vec(),
                });
            }
            if heads == 0 || shape[2] % heads != 0 {
                return Err(NumericsError::InvalidArgument(format!(
                    "width {} not divisible into {heads} heads",
                    shape[2]
                )));
            }
            let (seqs, tokens, width) = (shape[0], shape[1], shape[2]);
            let dh = width / heads;
            let mut probs = vec![0.0; seqs * heads * tokens * tokens];
            let mut out = vec![0.0; seqs * tokens * width];
            let mut scores = vec![0.0; tokens * tokens];
            let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
            for s in 0..seqs {
                let base = s * tokens * width;
                for h in 0..heads {
                    let col = h * dh;
                    for i in 0..tokens {
                        let qi = &qd[base + i * width + col..][..dh];
                        for j in 0..tokens {
                            let kj = &kd[base + j * width + col..][..dh];
                            scores[i * tokens + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        }
                    }
                    let p = &mut probs[(s * heads + h) * tokens * tokens..][..tokens * tokens];
                    softmax_scaled_rows(&scores, tokens, dh, p);
                    for i in 0..tokens {
                        for j in 0..tokens {
                            let pij = p[i * tokens + j];
                            let vj = &vd[base + j * width + col..][..dh];
                            let oi = &mut out[base + i * width + col..][..dh];
                            for (o, x) in oi.iter_mut().zip(vj) {
                                *o += pij * x;
                            }
                        }
                    }
                }
            }
            (out, probs, shape)
        };
        let out = Tensor::new(shape.clone(), out).expect("attention shape");
        check_finite("attention", &out)?;
        let probs_t = Tensor::new(vec![shape[0], heads, shape[1], shape[1]], probs.clone())
            .expect("probs shape");
        let rg = tape.requires(&[q.id, k.id, v.id]);
        let var = tape.push(
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                probs,
            },
            rg,
        );
        Ok((var, probs_t))
    }
}
