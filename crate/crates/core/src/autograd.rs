//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node whose
//! parents have smaller indices, so index order is a topological order and
//! [`Graph::backward`] visits each node once, from the loss down to the
//! leaves. Nodes that cannot reach a trainable leaf are skipped.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::capsule::{self, agreement_raw, margin_term, margin_term_grad, routing_sum_raw, squash_vjp, votes_raw};
use crate::conv::{self, Geometry};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Reshape(usize),
    Matmul(usize, usize),
    Softmax(usize, usize),
    BiasAdd(usize, usize),
    Conv(usize, usize, Geometry),
    Depthwise(usize, usize, Geometry),
    MaxPool(usize, Rc<Vec<usize>>),
    Squash(usize),
    Votes(usize, usize),
    RoutingSum(usize, usize),
    Agreement(usize, usize),
    MarginLoss(usize, Rc<Vec<usize>>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients of the loss with respect to every trainable leaf, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node { value: Rc::new(value), op, trainable: false, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A trainable leaf; it receives a gradient from [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, trainable: true, needs_grad: true });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A constant leaf (inputs, detached values).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, &[])
    }

    fn value_rc(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Propagates d(loss)/d(node) from a scalar loss to every trainable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0)?);
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if node.trainable {
                out.grads.insert(id, g);
                continue;
            }
            for (parent, pg) in local_grads(&nodes, node, &g) {
                if !nodes[parent].needs_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        // Trainable leaves unreachable from the loss still get a zero gradient.
        for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
            if node.trainable && !out.grads.contains_key(&id) {
                out.grads.insert(id, Tensor::zeros(node.value.shape())?);
            }
        }
        Ok(out)
    }
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].needs_grad
}

/// Gradients flowing to each parent of `node` given its upstream gradient `g`.
fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Op::Mul(a, b) => {
            vec![(*a, g.zip_map(val(*b), |x, y| x * y).unwrap()), (*b, g.zip_map(val(*a), |x, y| x * y).unwrap())]
        }
        Op::Scale(a, s) => vec![(*a, g.scale(*s))],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]).unwrap())],
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            vec![(*a, Tensor::full(val(*a).shape(), g.data()[0] / n).unwrap())]
        }
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap())],
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
        Op::Matmul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut out = Vec::new();
            if needs(nodes, *a) {
                let mut da = vec![0.0; m * k];
                gemm_nt(g.data(), y.data(), &mut da, m, n, k);
                out.push((*a, Tensor::new(x.shape(), da).unwrap()));
            }
            if needs(nodes, *b) {
                let mut db = vec![0.0; k * n];
                gemm_tn(x.data(), g.data(), &mut db, m, k, n);
                out.push((*b, Tensor::new(y.shape(), db).unwrap()));
            }
            out
        }
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let (outer, len, inner) = y.axis_split(*axis).unwrap();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |t: usize| (o * len + t) * inner + i;
                    let dot: f64 = (0..len).map(|t| g.data()[at(t)] * y.data()[at(t)]).sum();
                    for t in 0..len {
                        dx[at(t)] = y.data()[at(t)] * (g.data()[at(t)] - dot);
                    }
                }
            }
            vec![(*a, Tensor::new(y.shape(), dx).unwrap())]
        }
        Op::BiasAdd(x, b) => {
            let c = val(*b).len();
            let mut db = vec![0.0; c];
            for px in g.data().chunks(c) {
                for (d, v) in db.iter_mut().zip(px) {
                    *d += v;
                }
            }
            vec![(*x, g.clone()), (*b, Tensor::new(&[c], db).unwrap())]
        }
        Op::Conv(x, k, geom) => {
            let (dx, dk) = conv::standard_backward(val(*x), val(*k), geom, g, needs(nodes, *x));
            let mut out = vec![(*k, dk)];
            out.extend(dx.map(|d| (*x, d)));
            out
        }
        Op::Depthwise(x, k, geom) => {
            let (dx, dk) = conv::depthwise_backward(val(*x), val(*k), geom, g, needs(nodes, *x));
            let mut out = vec![(*k, dk)];
            out.extend(dx.map(|d| (*x, d)));
            out
        }
        Op::MaxPool(x, arg) => {
            let mut dx = vec![0.0; val(*x).len()];
            for (&src, gv) in arg.iter().zip(g.data()) {
                dx[src] += gv;
            }
            vec![(*x, Tensor::new(val(*x).shape(), dx).unwrap())]
        }
        Op::Squash(a) => {
            let s = val(*a);
            let d = *s.shape().last().unwrap();
            let mut dx = vec![0.0; s.len()];
            for ((sv, gv), o) in s.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)) {
                squash_vjp(sv, gv, o);
            }
            vec![(*a, Tensor::new(s.shape(), dx).unwrap())]
        }
        Op::Votes(u, w) => {
            let (uv, wv) = (val(*u), val(*w));
            let (b, i, j, d, e) = capsule::vote_dims(uv.shape(), wv.shape()).unwrap();
            let mut du = vec![0.0; uv.len()];
            let mut dw = vec![0.0; wv.len()];
            for bi in 0..b {
                for ii in 0..i {
                    let pose = &uv.data()[(bi * i + ii) * d..][..d];
                    for jj in 0..j {
                        let gv = &g.data()[((bi * i + ii) * j + jj) * e..][..e];
                        let base = (ii * j + jj) * d * e;
                        let mat = &wv.data()[base..][..d * e];
                        // du[d] += W[d,:] . g ; dW[d,:] += u[d] * g
                        gemm_nt(gv, mat, &mut du[(bi * i + ii) * d..][..d], 1, e, d);
                        gemm(pose, gv, &mut dw[base..][..d * e], d, 1, e);
                    }
                }
            }
            vec![(*u, Tensor::new(uv.shape(), du).unwrap()), (*w, Tensor::new(wv.shape(), dw).unwrap())]
        }
        Op::RoutingSum(c, u) => {
            let (cv, uv) = (val(*c), val(*u));
            let (b, i, j, e) = (uv.shape()[0], uv.shape()[1], uv.shape()[2], uv.shape()[3]);
            let mut dc = vec![0.0; cv.len()];
            let mut du = vec![0.0; uv.len()];
            for bi in 0..b {
                for ii in 0..i {
                    for jj in 0..j {
                        let ci = (bi * i + ii) * j + jj;
                        let gs = &g.data()[(bi * j + jj) * e..][..e];
                        let us = &uv.data()[ci * e..][..e];
                        dc[ci] = gs.iter().zip(us).map(|(x, y)| x * y).sum();
                        for (d, gv) in du[ci * e..][..e].iter_mut().zip(gs) {
                            *d = cv.data()[ci] * gv;
                        }
                    }
                }
            }
            vec![(*c, Tensor::new(cv.shape(), dc).unwrap()), (*u, Tensor::new(uv.shape(), du).unwrap())]
        }
        Op::Agreement(u, v) => {
            let (uv, vv) = (val(*u), val(*v));
            let (b, i, j, e) = (uv.shape()[0], uv.shape()[1], uv.shape()[2], uv.shape()[3]);
            let mut du = vec![0.0; uv.len()];
            let mut dv = vec![0.0; vv.len()];
            for bi in 0..b {
                for ii in 0..i {
                    for jj in 0..j {
                        let ga = g.data()[(bi * i + ii) * j + jj];
                        let us = &uv.data()[((bi * i + ii) * j + jj) * e..][..e];
                        let vs = &vv.data()[(bi * j + jj) * e..][..e];
                        for (d, x) in du[((bi * i + ii) * j + jj) * e..][..e].iter_mut().zip(vs) {
                            *d = ga * x;
                        }
                        for (d, x) in dv[(bi * j + jj) * e..][..e].iter_mut().zip(us) {
                            *d += ga * x;
                        }
                    }
                }
            }
            vec![(*u, Tensor::new(uv.shape(), du).unwrap()), (*v, Tensor::new(vv.shape(), dv).unwrap())]
        }
        Op::MarginLoss(v, labels) => {
            let vv = val(*v);
            let (b, j, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
            let scale = g.data()[0] / b as f64;
            let mut dv = vec![0.0; vv.len()];
            for bi in 0..b {
                for k in 0..j {
                    let at = (bi * j + k) * d;
                    let cap = &vv.data()[at..][..d];
                    let n = capsule::norm(cap);
                    if n == 0.0 {
                        continue;
                    }
                    let dn = margin_term_grad(n, k == labels[bi]) * scale;
                    for (o, x) in dv[at..][..d].iter_mut().zip(cap) {
                        *o = dn * x / n;
                    }
                }
            }
            vec![(*v, Tensor::new(vv.shape(), dv).unwrap())]
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Borrow of the node's current value.
    pub fn value(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes.borrow(), |n| n[self.id].value.as_ref())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn v(&self) -> Rc<Tensor> {
        self.graph.value_rc(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, &[self.id])
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, &[self.id, other.id])
    }

    /// The same value as a constant: gradients stop here.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.v().as_ref().clone())
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.v().add(&other.v())?;
        Ok(self.binary(other, value, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.v().zip_map(&other.v(), |a, b| a - b)?;
        Ok(self.binary(other, value, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.v().zip_map(&other.v(), |a, b| a * b)?;
        Ok(self.binary(other, value, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(self.v().scale(s), Op::Scale(self.id, s))
    }

    pub fn sum(&self) -> Var<'g> {
        self.unary(Tensor::scalar(self.v().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let v = self.v();
        self.unary(Tensor::scalar(v.sum() / v.len() as f64), Op::Mean(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(self.v().relu(), Op::Relu(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.v().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.v().matmul(&other.v())?;
        Ok(self.binary(other, value, Op::Matmul(self.id, other.id)))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let value = self.v().softmax(axis)?;
        Ok(self.unary(value, Op::Softmax(self.id, axis)))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn bias_add(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let value = conv::add_channel_bias(&self.v(), &bias.v())?;
        Ok(self.binary(bias, value, Op::BiasAdd(self.id, bias.id)))
    }

    /// Standard convolution of a batch `[B,H,W,M]` with `[k,k,M,N]`.
    pub fn conv2d(&self, kernel: &Var<'g>, geom: Geometry) -> Result<Var<'g>> {
        let value = conv::standard_forward(&self.v(), &kernel.v(), &geom)?;
        Ok(self.binary(kernel, value, Op::Conv(self.id, kernel.id, geom)))
    }

    /// Depthwise convolution of a batch `[B,H,W,M]` with `[k,k,M]`.
    pub fn depthwise_conv2d(&self, kernel: &Var<'g>, geom: Geometry) -> Result<Var<'g>> {
        let value = conv::depthwise_forward(&self.v(), &kernel.v(), &geom)?;
        Ok(self.binary(kernel, value, Op::Depthwise(self.id, kernel.id, geom)))
    }

    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<Var<'g>> {
        let (value, arg) = conv::maxpool_forward(&self.v(), window, stride)?;
        Ok(self.unary(value, Op::MaxPool(self.id, Rc::new(arg))))
    }

    /// Squash along the last axis.
    pub fn squash(&self) -> Var<'g> {
        self.unary(capsule::squash_last(&self.v()), Op::Squash(self.id))
    }

    /// Votes `[B,I,J,E]` from poses `[B,I,D]` and transforms `[I,J,D,E]`.
    pub fn votes(&self, weights: &Var<'g>) -> Result<Var<'g>> {
        let (u, w) = (self.v(), weights.v());
        if u.rank() != 3 {
            return Err(Error::Shape(format!("batched poses must be [B,I,D], got {:?}", u.shape())));
        }
        let (b, i, j, d, e) = capsule::vote_dims(u.shape(), w.shape())?;
        let value = Tensor::new(&[b, i, j, e], votes_raw(u.data(), w.data(), b, i, j, d, e))?;
        Ok(self.binary(weights, value, Op::Votes(self.id, weights.id)))
    }

    /// Coupled sum `s[b,j] = sum_i c[b,i,j] u[b,i,j]`; `self` is `c` `[B,I,J]`.
    pub fn routing_sum(&self, votes: &Var<'g>) -> Result<Var<'g>> {
        let (c, u) = (self.v(), votes.v());
        let [b, i, j, e] = *u.shape() else {
            return Err(Error::Shape(format!("votes must be [B,I,J,E], got {:?}", u.shape())));
        };
        if c.shape() != [b, i, j] {
            return Err(Error::Shape(format!("couplings {:?} do not match votes {:?}", c.shape(), u.shape())));
        }
        let value = Tensor::new(&[b, j, e], routing_sum_raw(c.data(), u.data(), b, i, j, e))?;
        Ok(self.binary(votes, value, Op::RoutingSum(self.id, votes.id)))
    }

    /// Agreement `a[b,i,j] = u[b,i,j] . v[b,j]`; `self` is the votes.
    pub fn agreement(&self, outputs: &Var<'g>) -> Result<Var<'g>> {
        let (u, v) = (self.v(), outputs.v());
        let [b, i, j, e] = *u.shape() else {
            return Err(Error::Shape(format!("votes must be [B,I,J,E], got {:?}", u.shape())));
        };
        if v.shape() != [b, j, e] {
            return Err(Error::Shape(format!("outputs {:?} do not match votes {:?}", v.shape(), u.shape())));
        }
        let value = Tensor::new(&[b, i, j], agreement_raw(u.data(), v.data(), b, i, j, e))?;
        Ok(self.binary(outputs, value, Op::Agreement(self.id, outputs.id)))
    }

    /// Mean over the batch of the per-item margin loss; `self` is `[B,J,D]`.
    pub fn margin_loss(&self, labels: &[usize]) -> Result<Var<'g>> {
        let v = self.v();
        let [b, j, d] = *v.shape() else {
            return Err(Error::Shape(format!("class capsules must be [B,J,D], got {:?}", v.shape())));
        };
        if labels.len() != b {
            return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= j) {
            return Err(Error::Label { label: bad, num_classes: j });
        }
        let total: f64 = v
            .data()
            .chunks(j * d)
            .zip(labels)
            .map(|(item, &l)| {
                item.chunks(d).enumerate().map(|(k, cap)| margin_term(capsule::norm(cap), k == l)).sum::<f64>()
            })
            .sum();
        Ok(self.unary(Tensor::scalar(total / b as f64), Op::MarginLoss(self.id, Rc::new(labels.to_vec()))))
    }
}

/// Routing by agreement on recorded votes `[B,I,J,E]`.
///
/// With `detach_logits` the logit updates are computed on detached values, so
/// gradients reach the votes only through the final coupled sum.
pub fn route<'g>(votes: &Var<'g>, iterations: usize, detach_logits: bool) -> Result<Var<'g>> {
    if iterations < 1 {
        return Err(Error::Contract("routing needs at least one iteration".into()));
    }
    let shape = votes.shape();
    let [b, i, j, _] = shape[..] else {
        return Err(Error::Shape(format!("votes must be [B,I,J,E], got {shape:?}")));
    };
    let g = votes.graph();
    let mut logits = g.constant(Tensor::zeros(&[b, i, j])?);
    let mut out = None;
    for t in 0..iterations {
        let c = logits.softmax(2)?;
        let v = c.routing_sum(votes)?.squash();
        if t + 1 < iterations {
            let agree = if detach_logits { votes.detach().agreement(&v.detach())? } else { votes.agreement(&v)? };
            logits = logits.add(&agree)?;
        }
        out = Some(v);
    }
    Ok(out.unwrap())
}

/// Maximum over coordinates of `|analytic - central| / max(1, |analytic|)`
/// where `central = (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_check(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor, h: f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match the input");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let down = f(&probe);
        probe.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[idx];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    worst
}

/// Runs `build` on a fresh graph with `x` as the only trainable leaf and
/// compares its gradient against central differences.
pub fn gradient_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let leaf = g.param(x.clone());
    let loss = build(&g, leaf)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(&leaf).cloned().expect("leaf gradient");
    let eval = |p: &Tensor| {
        let g = Graph::new();
        let leaf = g.constant(p.clone());
        let loss = build(&g, leaf).expect("forward succeeded once");
        let v = loss.value().data()[0];
        v
    };
    Ok(finite_difference_check(eval, x, &analytic, h))
}
