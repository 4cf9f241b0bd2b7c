//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during the
//! forward pass. Node ids are assigned in creation order, so every node's
//! inputs have smaller ids than the node itself and walking the ids downward
//! from the loss is a reverse topological order.
//!
//! A tape belongs to one forward/backward pass on one thread (`Tape` is not
//! `Sync`). Kernels are single-threaded, so results are bitwise deterministic.

mod conv;
mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;

pub use conv::{ConvAlgo, ConvSpec};
pub(crate) use ops::{gemm_acc, gemm_nt_acc, gemm_tn_acc};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Backward rule of one recorded operation.
///
/// Returns one entry per input (in input order): the gradient contribution
/// to that input, or `None` when the input receives nothing.
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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
        self.len() == 0
    }

    /// A leaf. Leaves with `requires_grad` receive gradients in [`Tape::backward`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node { value, inputs: Vec::new(), rule: None, requires_grad })
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Records the result of an operation on `inputs`. The backward rule is
    /// dropped when no input needs a gradient.
    pub fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[Var<'t>],
        rule: impl Backward + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let rule: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(rule)) } else { None };
        self.push(Node { value, inputs: ids, rule, requires_grad })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Runs the backward pass from a one-element `loss`, visiting each node
    /// at most once in reverse creation order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return shape_err(format!("backward needs a scalar loss, got shape {:?}", root.value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = &node.rule else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let contribs = rule.backward(&inputs, &node.value, &grad);
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (&input, contrib) in node.inputs.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaves produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape().as_slice()))
    }

    pub(crate) fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the recorded value. Do not hold it across new recordings.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value_ref().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}
