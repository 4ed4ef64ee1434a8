//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to at least one tracked
//! [`Var`]. Operations over constants only are computed eagerly and leave no
//! trace, so inference over constant parameters allocates nothing beyond the
//! live activations. Node ids are assigned in creation order, which is a
//! topological order of the recorded graph.

mod nn;
mod ops;

use std::cell::RefCell;

pub use nn::{conv_out_len, conv_transpose_out_len, BatchNormMode, BatchNormStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub type NodeId = usize;

/// Vector-Jacobian product of one recorded op: given the gradient of the
/// output and which parents need a gradient, returns one entry per parent.
pub type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &[bool]) -> Result<Vec<Option<Tensor<E>>>>>;

struct Node<E: Element> {
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<E>>,
}

/// A value flowing through a computation, tracked or constant.
#[derive(Clone, Debug)]
pub struct Var<E: Element = f32> {
    value: Tensor<E>,
    node: Option<NodeId>,
}

impl<E: Element> Var<E> {
    pub fn constant(value: Tensor<E>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<E> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

/// Recording tape. Single-threaded; consumed by [`Tape::backward`].
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor whose gradient is wanted.
    pub fn leaf(&self, value: Tensor<E>) -> Var<E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// Records an op producing `value` from `parents`. When no parent is
    /// tracked the result is a constant and nothing is stored.
    pub fn record(&self, value: Tensor<E>, parents: &[&Var<E>], backward: BackwardFn<E>) -> Var<E> {
        if parents.iter().all(|p| p.node.is_none()) {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(backward),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited at most once,
    /// in reverse creation order.
    pub fn backward(self, loss: &Var<E>) -> Result<Gradients<E>> {
        if loss.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let mut nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape(), E::one()));

        for id in (0..=root).rev() {
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                continue; // leaf: keep its gradient
            };
            let Some(g) = grads[id].take() else {
                continue; // not on a path to the loss
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (parent, pg) else {
                    continue;
                };
                grads[*pid] = Some(match grads[*pid].take() {
                    None => pg,
                    Some(acc) => acc.zip_map(&pg, "grad accumulate", |a, b| a + b)?,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaves after a backward sweep.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient with respect to `var`; zeros when `var` did not reach the loss.
    pub fn wrt(&self, var: &Var<E>) -> Tensor<E> {
        var.node
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
