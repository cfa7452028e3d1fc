//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is the computation record: every primitive applied through it is
//! appended in evaluation order together with its value. [`Graph::backward`]
//! walks the record in reverse, and [`Graph::forward`] replays it on new leaf
//! values.
//!
//! ```
//! use dip_core::autograd::Graph;
//! use dip_core::Tensor;
//!
//! let g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward_scalar(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;
pub(crate) mod ops;

use std::cell::{Ref, RefCell};

pub use gradcheck::{grad_check, ScalarFunction};
pub use ops::Op;

use crate::error::{DipError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it is differentiable iff `value.requires_grad()`.
    pub fn input(&self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.input(value.with_grad(true))
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.input(value.with_grad(false))
    }

    /// A constant leaf holding the current value of `v`; gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Leaves in creation order, i.e. the signature expected by [`Graph::forward`].
    pub fn leaves(&self) -> Vec<Var> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Leaf)
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// The recorded primitives in evaluation order.
    pub fn trace(&self) -> Vec<Op> {
        self.nodes.borrow().iter().map(|n| n.op.clone()).collect()
    }

    pub fn apply(&self, op: Op, inputs: &[Var]) -> Result<Var> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let value = ops::forward(&op, &xs)?;
            (value, inputs.iter().any(|v| nodes[v.0].requires_grad))
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs: inputs.to_vec(), value, requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    fn unary(&self, op: Op, x: Var) -> Var {
        self.apply(op, &[x]).expect("elementwise op cannot fail on a valid node")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), x)
    }

    pub fn offset(&self, x: Var, c: f64) -> Var {
        self.unary(Op::Offset(c), x)
    }

    pub fn pow(&self, x: Var, p: f64) -> Var {
        self.unary(Op::Pow(p), x)
    }

    pub fn square(&self, x: Var) -> Var {
        self.pow(x, 2.0)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(Op::Sqrt, x)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x)
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(Op::Gelu, x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(Op::Relu, x)
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm(eps), &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(perm.to_vec()), &[x])
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), xs)
    }

    pub fn repeat(&self, x: Var, n: usize) -> Var {
        self.unary(Op::Repeat(n), x)
    }

    pub fn sum_last(&self, x: Var) -> Result<Var> {
        self.apply(Op::SumLast, &[x])
    }

    pub fn mean_last(&self, x: Var) -> Result<Var> {
        self.apply(Op::MeanLast, &[x])
    }

    pub fn sum(&self, x: Var) -> Var {
        self.unary(Op::SumAll, x)
    }

    pub fn mean(&self, x: Var) -> Var {
        self.unary(Op::MeanAll, x)
    }

    pub fn gather(&self, x: Var, flat_indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather(flat_indices), &[x])
    }

    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(Op::CrossEntropy(labels.to_vec()), &[logits])
    }

    /// `x * w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Gradients of `sum(seed * output)` with respect to every differentiable leaf.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(DipError::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), out_shape),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if node.op == Op::Leaf || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &nodes[v.0].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|v| nodes[v.0].requires_grad).collect();
            let input_grads = ops::backward(&node.op, &xs, &node.value, &dy, &need);
            for ((v, grad), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                let (Some(grad), true) = (grad, needed) else { continue };
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += *g;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
        }
        // Only leaf gradients survive; intermediates were consumed above.
        for (i, node) in nodes.iter().enumerate() {
            if node.op != Op::Leaf || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let shape = self.shape(output);
        if shape.iter().product::<usize>() != 1 {
            return Err(DipError::shape("backward", format!("output {shape:?} is not scalar")));
        }
        self.backward(output, &Tensor::ones(&shape))
    }

    /// Replays the record on new leaf values and returns the values of `outputs`.
    ///
    /// `inputs` must follow [`Graph::leaves`] order. The graph itself is not
    /// modified.
    pub fn forward(&self, inputs: &[Tensor<T>], outputs: &[Var]) -> Result<Vec<Tensor<T>>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        let mut leaves = inputs.iter();
        for node in nodes.iter() {
            let value = if node.op == Op::Leaf {
                let given = leaves
                    .next()
                    .ok_or_else(|| DipError::shape("leaf", "fewer inputs than recorded leaves"))?;
                if given.shape() != node.value.shape() {
                    return Err(DipError::shape(
                        "leaf",
                        format!("input {:?} vs recorded {:?}", given.shape(), node.value.shape()),
                    ));
                }
                given.clone()
            } else {
                let xs: Vec<&Tensor<T>> = node
                    .inputs
                    .iter()
                    .map(|v| values[v.0].as_ref().expect("inputs precede their consumers"))
                    .collect();
                ops::forward(&node.op, &xs)?
            };
            values.push(Some(value));
        }
        if leaves.next().is_some() {
            return Err(DipError::shape("leaf", "more inputs than recorded leaves"));
        }
        Ok(outputs
            .iter()
            .map(|v| values[v.0].take().expect("each output requested once"))
            .collect())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
