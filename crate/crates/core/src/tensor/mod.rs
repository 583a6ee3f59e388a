//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every forward operation is recorded on a [`Tape`] together with its
//! backward rule. Calling [`Tape::backward`] on a scalar output fills a
//! gradient buffer for every node that (transitively) depends on a
//! `requires_grad` leaf. Storage is row-major `Vec<f64>`; there is no
//! broadcasting beyond scalar-with-tensor and suffix-shaped (bias-style)
//! addition/multiplication, which keeps every backward rule auditable.

mod check;
mod ops;

pub use check::{grad_check, GradCheckReport};

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Identifier of a node on a tape. Nodes are appended in execution order,
/// so ids are already topologically sorted.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// A value recorded on the tape. `data` is shared between the tape and any
/// handles given out, so cloning a `Tensor` is cheap.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    node: NodeId,
    tape_id: u64,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "scalar() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

/// Backward rule selector. Variants store whatever the rule needs beyond the
/// recorded input/output values.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// b's shape is a suffix of a's shape (bias / row-vector broadcast).
    AddBcast(NodeId, NodeId),
    MulBcast(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    BatchMatmul(NodeId, NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize, usize),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    L2Normalize(NodeId),
    LayerNorm(NodeId),
    Dropout(NodeId, Rc<Vec<f64>>),
    Embedding(NodeId, Rc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Operation record for one logical execution context. All tensors used in
/// an op must belong to the same tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_tape(&self, t: &Tensor) -> Result<()> {
        if t.tape_id != self.id {
            return Err(Error::Tape(
                "tensor belongs to a different tape".to_string(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Tensor {
        let data = Rc::new(data);
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape: shape.clone(),
            data: Rc::clone(&data),
            needs_grad,
            op,
        });
        self.grads.push(None);
        Tensor {
            shape,
            data,
            requires_grad: needs_grad,
            node,
            tape_id: self.id,
        }
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Register a leaf value. Leaves with `requires_grad` receive gradients
    /// after `backward`.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "leaf: shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        check_finite(&data, "leaf")?;
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    /// Rank-0 constant.
    pub fn scalar_const(&mut self, v: f64) -> Result<Tensor> {
        self.leaf(vec![v], vec![], false)
    }

    /// Gradient buffer of a tensor, if one was populated by `backward`.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads[t.node.0].as_deref()
    }

    /// Gradient buffer, erroring when absent.
    pub fn grad_required(&self, t: &Tensor) -> Result<&[f64]> {
        self.grad(t)
            .ok_or_else(|| Error::Tape(format!("missing gradient for node {}", t.node.0)))
    }

    /// Clear gradients and re-arm `backward`. Forward nodes are kept, so a
    /// second objective can be differentiated over the same activations.
    pub fn reset_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar loss. Calling this twice without
    /// `reset_grads` is an error rather than silent accumulation.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        self.check_tape(loss)?;
        if loss.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        if self.backward_done {
            return Err(Error::Tape(
                "backward already called on this tape; call reset_grads first".to_string(),
            ));
        }
        self.backward_done = true;
        self.grads[loss.node.0] = Some(vec![1.0]);

        for id in (0..=loss.node.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].data.len();
        let buf = self.grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) -> Result<()> {
        // Inputs of node `id` always have smaller ids, so the entry for `id`
        // itself (currently taken) is never touched here.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |buf| add_assign(buf, g));
                self.acc(*b, |buf| add_assign(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |buf| add_assign(buf, g));
                self.acc(*b, |buf| sub_assign(buf, g));
            }
            Op::Mul(a, b) => {
                let av = Rc::clone(&self.nodes[a.0].data);
                let bv = Rc::clone(&self.nodes[b.0].data);
                self.acc(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                self.acc(*b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddScalar(a) => {
                self.acc(*a, |buf| add_assign(buf, g));
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                self.acc(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += c * g[i];
                    }
                });
            }
            Op::AddBcast(a, b) => {
                let vlen = self.nodes[b.0].data.len();
                self.acc(*a, |buf| add_assign(buf, g));
                self.acc(*b, |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % vlen] += gi;
                    }
                });
            }
            Op::MulBcast(a, b) => {
                let av = Rc::clone(&self.nodes[a.0].data);
                let bv = Rc::clone(&self.nodes[b.0].data);
                let vlen = bv.len();
                self.acc(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i % vlen];
                    }
                });
                self.acc(*b, |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % vlen] += gi * av[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let av = Rc::clone(&self.nodes[a.0].data);
                let bv = Rc::clone(&self.nodes[b.0].data);
                let (m, k) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                let n = self.shape_of(*b)[1];
                self.acc(*a, |buf| ops::matmul_grad_lhs(g, &bv, m, k, n, buf));
                self.acc(*b, |buf| ops::matmul_grad_rhs(&av, g, m, k, n, buf));
            }
            Op::BatchMatmul(a, b) => {
                let av = Rc::clone(&self.nodes[a.0].data);
                let bv = Rc::clone(&self.nodes[b.0].data);
                let sa = self.shape_of(*a).to_vec();
                let sb = self.shape_of(*b).to_vec();
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                self.acc(*a, |buf| {
                    for t in 0..bt {
                        ops::matmul_grad_lhs(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut buf[t * m * k..(t + 1) * m * k],
                        );
                    }
                });
                self.acc(*b, |buf| {
                    for t in 0..bt {
                        ops::matmul_grad_rhs(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut buf[t * k * n..(t + 1) * k * n],
                        );
                    }
                });
            }
            Op::Tanh(a) => {
                let y = Rc::clone(&self.nodes[id].data);
                self.acc(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = Rc::clone(&self.nodes[id].data);
                self.acc(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = Rc::clone(&self.nodes[a.0].data);
                self.acc(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / x[i];
                    }
                });
            }
            Op::Softmax(a) => {
                let y = Rc::clone(&self.nodes[id].data);
                let d = *self.nodes[id].shape.last().expect("softmax rank >= 1");
                self.acc(*a, |buf| {
                    for r in 0..y.len() / d {
                        let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..d {
                            buf[r * d + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = Rc::clone(&self.nodes[id].data);
                let d = *self.nodes[id].shape.last().expect("log-softmax rank >= 1");
                self.acc(*a, |buf| {
                    for r in 0..y.len() / d {
                        let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let gsum: f64 = gs.iter().sum();
                        for j in 0..d {
                            buf[r * d + j] += gs[j] - ys[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(*a, |buf| {
                    for v in buf.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len() as f64;
                let g0 = g[0] / n;
                self.acc(*a, |buf| {
                    for v in buf.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::SumLast(a) => {
                let d = *self.shape_of(*a).last().expect("sum_last rank >= 1");
                self.acc(*a, |buf| {
                    for (r, &gr) in g.iter().enumerate() {
                        for j in 0..d {
                            buf[r * d + j] += gr;
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let out_shape = self.nodes[id].shape.clone();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for p in parts {
                    let pa = self.shape_of(*p)[*axis];
                    let off = offset;
                    self.acc(*p, |buf| {
                        for o in 0..outer {
                            for x in 0..pa {
                                let src = (o * total_axis + off + x) * inner;
                                let dst = (o * pa + x) * inner;
                                for i in 0..inner {
                                    buf[dst + i] += g[src + i];
                                }
                            }
                        }
                    });
                    offset += pa;
                }
            }
            Op::Slice(a, axis, start, len) => {
                let in_shape = self.shape_of(*a).to_vec();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let full_axis = in_shape[*axis];
                let (start, len) = (*start, *len);
                let axis = *axis;
                let _ = axis;
                self.acc(*a, |buf| {
                    for o in 0..outer {
                        for x in 0..len {
                            let dst = (o * full_axis + start + x) * inner;
                            let src = (o * len + x) * inner;
                            for i in 0..inner {
                                buf[dst + i] += g[src + i];
                            }
                        }
                    }
                });
            }
            Op::Permute(a, perm) => {
                let in_shape = self.shape_of(*a).to_vec();
                let out_shape = self.nodes[id].shape.clone();
                // dg/da = permute(g) by the inverse permutation; scatter
                // directly using forward index math.
                let perm = perm.clone();
                self.acc(*a, |buf| {
                    ops::permute_scatter_add(g, &out_shape, &in_shape, &perm, buf);
                });
            }
            Op::Reshape(a) => {
                self.acc(*a, |buf| add_assign(buf, g));
            }
            Op::L2Normalize(a) => {
                let x = Rc::clone(&self.nodes[a.0].data);
                let y = Rc::clone(&self.nodes[id].data);
                let d = *self.shape_of(*a).last().expect("l2 rank >= 1");
                self.acc(*a, |buf| {
                    for r in 0..x.len() / d {
                        let xs = &x[r * d..(r + 1) * d];
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..d {
                            buf[r * d + j] += (gs[j] - ys[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let x = Rc::clone(&self.nodes[a.0].data);
                let y = Rc::clone(&self.nodes[id].data);
                let d = *self.shape_of(*a).last().expect("layer-norm rank >= 1");
                self.acc(*a, |buf| {
                    let dn = d as f64;
                    for r in 0..x.len() / d {
                        let xs = &x[r * d..(r + 1) * d];
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let mu = xs.iter().sum::<f64>() / dn;
                        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dn;
                        let s = (var + ops::LAYER_NORM_EPS).sqrt();
                        let mg = gs.iter().sum::<f64>() / dn;
                        let mgy = gs.iter().zip(ys).map(|(gi, yi)| gi * yi).sum::<f64>() / dn;
                        for j in 0..d {
                            buf[r * d + j] += (gs[j] - mg - ys[j] * mgy) / s;
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                let mask = Rc::clone(mask);
                self.acc(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let ids = Rc::clone(ids);
                let d = *self.shape_of(*table).last().expect("embedding table 2-D");
                self.acc(*table, |buf| {
                    for (pos, &tok) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[tok * d + j] += g[pos * d + j];
                        }
                    }
                });
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}

fn add_assign(buf: &mut [f64], g: &[f64]) {
    for i in 0..buf.len() {
        buf[i] += g[i];
    }
}

fn sub_assign(buf: &mut [f64], g: &[f64]) {
    for i in 0..buf.len() {
        buf[i] -= g[i];
    }
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} produced NaN/Inf")))
    }
}
