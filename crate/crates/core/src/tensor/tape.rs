//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its value and the ids of its inputs, so node
//! order is a topological order by construction. [`Tape::backward`] walks the
//! nodes once in reverse.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::{kernels, Ops, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Axpy(usize, f64, usize),
    Sum(usize),
    Matmul(usize, usize),
    Conv3x3(usize, usize),
    AddBias(usize, usize, usize),
    Softplus(usize),
    Sigmoid(usize),
    Concat(Vec<usize>, usize),
    Reshape(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Cotangents produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a trainable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Arc::new(t), Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn val(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.id].value)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs = self.needs(inputs);
        self.push(Arc::new(value), op, needs)
    }

    /// Reverse pass from a single-element `loss`. A tape can be differentiated
    /// once; call [`Tape::reset`] before recording a new pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::contract(
                "backward already ran on this tape; reset it before another pass",
            ));
        }
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.id)
            .ok_or_else(|| Error::contract("loss is not on this tape"))?;
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::new(root.value.shape(), vec![1.0])?);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| nodes[i].value.as_ref();
            let wants = |i: usize| nodes[i].needs_grad;
            let mut acc = |i: usize, contrib: Tensor| -> Result<()> {
                accumulate(&mut grads[i], contrib)
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(*a, g.clone())?;
                    }
                    if wants(*b) {
                        acc(*b, g.clone())?;
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        acc(*a, g.clone())?;
                    }
                    if wants(*b) {
                        acc(*b, kernels::scale(&g, -1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, kernels::mul(&g, val(*b))?)?;
                    }
                    if wants(*b) {
                        acc(*b, kernels::mul(&g, val(*a))?)?;
                    }
                }
                Op::Scale(a, k) => acc(*a, kernels::scale(&g, *k))?,
                Op::AddScalar(a) => acc(*a, g.clone())?,
                Op::Axpy(a, k, b) => {
                    if wants(*a) {
                        acc(*a, g.clone())?;
                    }
                    if wants(*b) {
                        acc(*b, kernels::scale(&g, *k))?;
                    }
                }
                Op::Sum(a) => {
                    let gv = g.item()?;
                    acc(*a, Tensor::full(val(*a).shape(), gv))?;
                }
                Op::Matmul(a, b) => {
                    if wants(*a) {
                        let bt = kernels::transpose2(val(*b))?;
                        acc(*a, kernels::matmul(&g, &bt)?)?;
                    }
                    if wants(*b) {
                        let at = kernels::transpose2(val(*a))?;
                        acc(*b, kernels::matmul(&at, &g)?)?;
                    }
                }
                Op::Conv3x3(x, w) => {
                    if wants(*x) {
                        acc(*x, kernels::conv3x3_grad_input(&g, val(*w), val(*x).shape())?)?;
                    }
                    if wants(*w) {
                        acc(*w, kernels::conv3x3_grad_weight(&g, val(*x), val(*w).shape())?)?;
                    }
                }
                Op::AddBias(x, b, axis) => {
                    if wants(*b) {
                        acc(*b, kernels::reduce_to_axis(&g, *axis)?)?;
                    }
                    if wants(*x) {
                        acc(*x, g.clone())?;
                    }
                }
                Op::Softplus(a) => {
                    let s = kernels::sigmoid(val(*a));
                    acc(*a, kernels::mul(&g, &s)?)?;
                }
                Op::Sigmoid(a) => {
                    let ds = node.value.map(|s| s * (1.0 - s));
                    acc(*a, kernels::mul(&g, &ds)?)?;
                }
                Op::Concat(parts, axis) => {
                    let extents: Vec<usize> = parts.iter().map(|&p| val(p).shape()[*axis]).collect();
                    for (p, piece) in parts.iter().zip(kernels::split(&g, *axis, &extents)?) {
                        if wants(*p) {
                            acc(*p, piece)?;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, g.clone().reshape(&shape)?)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(contrib),
        Some(existing) => {
            kernels::check_same(existing, &contrib, "gradient accumulation")?;
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
    }
    Ok(())
}

impl Ops for Tape {
    type V = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.push(Arc::new(t), Op::Leaf, false)
    }

    fn value(&self, v: &Var) -> Arc<Tensor> {
        self.val(*v)
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::add(&self.val(*a), &self.val(*b))?;
        Ok(self.record(out, Op::Add(a.id, b.id), &[a.id, b.id]))
    }

    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::sub(&self.val(*a), &self.val(*b))?;
        Ok(self.record(out, Op::Sub(a.id, b.id), &[a.id, b.id]))
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::mul(&self.val(*a), &self.val(*b))?;
        Ok(self.record(out, Op::Mul(a.id, b.id), &[a.id, b.id]))
    }

    fn scale(&self, a: &Var, k: f64) -> Var {
        let out = kernels::scale(&self.val(*a), k);
        self.record(out, Op::Scale(a.id, k), &[a.id])
    }

    fn add_scalar(&self, a: &Var, k: f64) -> Var {
        let out = kernels::add_scalar(&self.val(*a), k);
        self.record(out, Op::AddScalar(a.id), &[a.id])
    }

    fn axpy(&self, a: &Var, k: f64, b: &Var) -> Result<Var> {
        let out = kernels::axpy(&self.val(*a), k, &self.val(*b))?;
        Ok(self.record(out, Op::Axpy(a.id, k, b.id), &[a.id, b.id]))
    }

    fn sum(&self, a: &Var) -> Var {
        let out = Tensor::scalar(self.val(*a).sum());
        self.record(out, Op::Sum(a.id), &[a.id])
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul(&self.val(*a), &self.val(*b))?;
        Ok(self.record(out, Op::Matmul(a.id, b.id), &[a.id, b.id]))
    }

    fn conv3x3(&self, x: &Var, w: &Var) -> Result<Var> {
        let out = kernels::conv3x3(&self.val(*x), &self.val(*w))?;
        Ok(self.record(out, Op::Conv3x3(x.id, w.id), &[x.id, w.id]))
    }

    fn add_bias(&self, x: &Var, b: &Var, axis: usize) -> Result<Var> {
        let out = kernels::add_bias(&self.val(*x), &self.val(*b), axis)?;
        Ok(self.record(out, Op::AddBias(x.id, b.id, axis), &[x.id, b.id]))
    }

    fn softplus(&self, a: &Var) -> Var {
        let out = kernels::softplus(&self.val(*a));
        self.record(out, Op::Softplus(a.id), &[a.id])
    }

    fn sigmoid(&self, a: &Var) -> Var {
        let out = kernels::sigmoid(&self.val(*a));
        self.record(out, Op::Sigmoid(a.id), &[a.id])
    }

    fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| self.val(*p)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.record(out, Op::Concat(ids.clone(), axis), &ids))
    }

    fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(*a).as_ref().clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape(a.id), &[a.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let loss = tape.sum(&x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let loss = tape.sum(&x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
        tape.reset();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let loss = tape.sum(&x);
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let loss = tape.dot(&x, &c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }
}
