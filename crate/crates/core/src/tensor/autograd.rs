//! Reverse-mode differentiation over a reference-counted operation graph.
//!
//! Every [`Var`] remembers the primitive that produced it and its inputs.
//! [`Var::backward`] orders the reachable graph topologically (inputs before
//! outputs) and replays it in reverse, so each leaf receives its gradient
//! once. Nodes that do not require gradients keep no parents, which lets
//! inference free intermediates as soon as they go out of scope.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, LayerNormCache};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn next_id() -> usize {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

enum Op<T: Scalar> {
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Scale(Var<T>, T),
    MatMul(Var<T>, Var<T>),
    Reshape(Var<T>),
    Permute(Var<T>, Vec<usize>),
    Softmax(Var<T>, usize),
    LogSoftmax(Var<T>),
    LayerNorm {
        x: Var<T>,
        gain: Var<T>,
        bias: Var<T>,
        cache: LayerNormCache<T>,
    },
    Gelu(Var<T>),
    SumAll(Var<T>),
    SumAxis(Var<T>, usize),
    Gather(Var<T>, Vec<usize>),
    WhereRows(Rc<[bool]>, Var<T>, Var<T>),
    MaskRows(Rc<[bool]>, Var<T>),
    Concat(Vec<Var<T>>, usize),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<&Var<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::WhereRows(_, a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Gather(a, _)
            | Op::MaskRows(_, a) => vec![a],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Concat(parts, _) => parts.iter().collect(),
        }
    }
}

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
    consumed: Cell<bool>,
}

/// A tensor participating in the differentiation graph.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

/// Gradients keyed by the leaf (or any recorded node) they belong to.
pub struct Gradients<T: Scalar> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.0.id)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.0.id)
    }
}

impl<T: Scalar> Var<T> {
    /// A leaf that receives a gradient on `backward`.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op: None,
            consumed: Cell::new(false),
        }))
    }

    fn from_op(value: Tensor<T>, op: Op<T>) -> Self {
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op: requires_grad.then_some(op),
            consumed: Cell::new(false),
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let v = kernels::broadcast_binary("add", self.value(), other.value(), |a, b| a + b)?;
        Ok(Self::from_op(v, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let v = kernels::broadcast_binary("sub", self.value(), other.value(), |a, b| a - b)?;
        Ok(Self::from_op(v, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let v = kernels::broadcast_binary("mul", self.value(), other.value(), |a, b| a * b)?;
        Ok(Self::from_op(v, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_op(self.value().map(|x| x * s), Op::Scale(self.clone(), s))
    }

    pub fn square(&self) -> Self {
        self.mul(self).expect("same shape")
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let v = kernels::matmul(self.value(), other.value())?;
        Ok(Self::from_op(v, Op::MatMul(self.clone(), other.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        Ok(Self::from_op(v, Op::Reshape(self.clone())))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let v = kernels::permute(self.value(), perm)?;
        Ok(Self::from_op(v, Op::Permute(self.clone(), perm.to_vec())))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let v = kernels::softmax(self.value(), axis)?;
        Ok(Self::from_op(v, Op::Softmax(self.clone(), axis)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Self {
        let v = kernels::log_softmax(self.value());
        Self::from_op(v, Op::LogSoftmax(self.clone()))
    }

    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: f64) -> Result<Self> {
        let (v, cache) = kernels::layer_norm(self.value(), gain.value(), bias.value(), T::lit(eps))?;
        Ok(Self::from_op(
            v,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                cache,
            },
        ))
    }

    pub fn gelu(&self) -> Self {
        Self::from_op(self.value().map(kernels::gelu), Op::Gelu(self.clone()))
    }

    pub fn sum(&self) -> Self {
        let total: T = self.value().data().iter().copied().sum();
        Self::from_op(Tensor::scalar(total), Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Self {
        let n = T::lit(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let v = kernels::sum_axis(self.value(), axis, true)?;
        Ok(Self::from_op(v, Op::SumAxis(self.clone(), axis)))
    }

    /// Rows `idx` of a rank-2 table.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let v = kernels::gather_rows(self.value(), idx)?;
        Ok(Self::from_op(v, Op::Gather(self.clone(), idx.to_vec())))
    }

    /// Rows (over the last axis) from `self` where `cond` holds, else from `other`.
    pub fn where_rows(&self, cond: &[bool], other: &Self) -> Result<Self> {
        let v = kernels::where_rows(cond, self.value(), other.value())?;
        Ok(Self::from_op(v, Op::WhereRows(cond.into(), self.clone(), other.clone())))
    }

    /// Zeroes rows (over the last axis) where `keep` is false.
    pub fn mask_rows(&self, keep: &[bool]) -> Result<Self> {
        let d = *self.shape().last().unwrap_or(&1);
        if keep.len() * d != self.value().len() {
            return Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                reason: format!("row mask has {} entries", keep.len()),
            });
        }
        let v = kernels::mask_rows(keep, self.value(), true);
        Ok(Self::from_op(v, Op::MaskRows(keep.into(), self.clone())))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
        let v = kernels::concat(&values, axis)?;
        Ok(Self::from_op(v, Op::Concat(parts.to_vec(), axis)))
    }

    /// Reverse-mode sweep from a scalar loss. Each loss node may be
    /// differentiated once.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value().len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.consumed.replace(true) {
            return Err(Error::contract("backward already ran for this loss; run forward again"));
        }
        let mut grads = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { grads });
        }
        let order = self.topological_order();
        grads.insert(self.0.id, Tensor::ones(self.shape()));
        for node in order.iter().rev() {
            let Some(op) = node.0.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads.get(&node.0.id).cloned() else {
                continue;
            };
            for (parent, g) in node.input_grads(op, &grad) {
                if !parent.requires_grad() {
                    continue;
                }
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + b;
                        }
                    }
                    None => {
                        grads.insert(parent.0.id, g);
                    }
                }
            }
            if node.0.op.is_some() && !Rc::ptr_eq(&node.0, &self.0) {
                grads.remove(&node.0.id);
            }
        }
        Ok(Gradients { grads })
    }

    /// Inputs before outputs; iterative DFS so deep graphs do not overflow.
    fn topological_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.0.op.as_ref() {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    fn input_grads(&self, op: &Op<T>, grad: &Tensor<T>) -> Vec<(Var<T>, Tensor<T>)> {
        let reduce = |v: &Var<T>, g: Tensor<T>| kernels::reduce_to(&g, v.shape());
        let zip = |a: &Tensor<T>, b: &Tensor<T>, f: fn(T, T) -> T| {
            kernels::broadcast_binary("grad", a, b, f).expect("shapes validated in forward")
        };
        match op {
            Op::Add(a, b) => vec![
                (a.clone(), reduce(a, grad.clone())),
                (b.clone(), reduce(b, grad.clone())),
            ],
            Op::Sub(a, b) => vec![
                (a.clone(), reduce(a, grad.clone())),
                (b.clone(), reduce(b, grad.map(|x| -x))),
            ],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if a.requires_grad() {
                    out.push((a.clone(), reduce(a, zip(grad, b.value(), |g, y| g * y))));
                }
                if b.requires_grad() {
                    out.push((b.clone(), reduce(b, zip(grad, a.value(), |g, x| g * x))));
                }
                out
            }
            Op::Scale(a, s) => {
                let s = *s;
                vec![(a.clone(), grad.map(|g| g * s))]
            }
            Op::MatMul(a, b) => {
                let (da, db) =
                    kernels::matmul_backward(a.value(), b.value(), grad, a.requires_grad(), b.requires_grad());
                let mut out = Vec::new();
                if let Some(da) = da {
                    out.push((a.clone(), da));
                }
                if let Some(db) = db {
                    out.push((b.clone(), db));
                }
                out
            }
            Op::Reshape(a) => vec![(a.clone(), grad.reshape(a.shape()).expect("same numel"))],
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_perm(perm);
                vec![(a.clone(), kernels::permute(grad, &inv).expect("valid permutation"))]
            }
            Op::Softmax(a, axis) => vec![(a.clone(), kernels::softmax_backward(self.value(), grad, *axis))],
            Op::LogSoftmax(a) => vec![(a.clone(), kernels::log_softmax_backward(self.value(), grad))],
            Op::LayerNorm { x, gain, bias, cache } => {
                let (dx, dg, db) = kernels::layer_norm_backward(cache, gain.value(), grad);
                vec![(x.clone(), dx), (gain.clone(), dg), (bias.clone(), db)]
            }
            Op::Gelu(a) => vec![(a.clone(), zip(grad, a.value(), |g, x| g * kernels::gelu_grad(x)))],
            Op::SumAll(a) => vec![(a.clone(), Tensor::full(a.shape(), grad.item()))],
            Op::SumAxis(a, axis) => vec![(a.clone(), kernels::expand_axis(grad, a.shape(), *axis))],
            Op::Gather(table, idx) => vec![(table.clone(), kernels::scatter_rows(grad, idx, table.shape()))],
            Op::WhereRows(cond, a, b) => vec![
                (a.clone(), kernels::mask_rows(cond, grad, true)),
                (b.clone(), kernels::mask_rows(cond, grad, false)),
            ],
            Op::MaskRows(keep, a) => vec![(a.clone(), kernels::mask_rows(keep, grad, true))],
            Op::Concat(parts, axis) => {
                let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[*axis]).collect();
                parts
                    .iter()
                    .cloned()
                    .zip(kernels::split_axis(grad, &sizes, *axis))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: &[f64]) -> Var<f64> {
        Var::param(Tensor::from_f64(shape, data).unwrap())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = param(&[3], &[1., -2., 5.]);
        let g = x.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = param(&[2], &[1., 2.]);
        let g = x.square().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let x = param(&[2], &[1., 2.]);
        let loss = x.sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = param(&[2], &[1., 2.]);
        assert!(matches!(x.scale(2.0).backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x + x) => grad = 2x + 1
        let x = param(&[2], &[3., -1.]);
        let y = x.square().add(&x).unwrap();
        let g = y.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[7., -1.]);
    }

    #[test]
    fn no_grad_drops_history() {
        let x = param(&[2], &[1., 2.]);
        let y = no_grad(|| x.square());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = param(&[2], &[1., 2.]);
        let c = Var::constant(Tensor::from_f64(&[2], &[3., 4.]).unwrap());
        let g = x.mul(&c).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[3., 4.]);
        assert!(g.get(&c).is_none());
    }
}
