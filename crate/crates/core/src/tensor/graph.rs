//! Computation record and reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value produced while it is alive.
//! Operations append nodes in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse. The
//! walk order is fixed, which makes gradient accumulation bit-reproducible.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::ops::{self, Op};
use super::params::{ParamId, ParamStore};
use super::{Tensor, TensorError};

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A single-owner computation record.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    params_trainable: bool,
    consumed: Cell<bool>,
    param_nodes: RefCell<HashMap<(u64, usize), usize>>,
}

/// Handle to a value inside a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records operations for a later [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            params_trainable: true,
            consumed: Cell::new(false),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    /// A graph that only evaluates; nothing is kept for differentiation.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Parameters bound through [`Graph::param`] become constants.
    ///
    /// Used when optimizing an input against frozen models.
    pub fn with_frozen_params(mut self) -> Self {
        self.params_trainable = false;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked when the graph is recording.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, self.recording)
    }

    /// Binds a stored parameter. Repeated binds of the same parameter share one node.
    pub fn param<'g>(&'g self, store: &ParamStore, id: ParamId) -> Var<'g> {
        let key = (store.uid(), id.index());
        if let Some(&node) = self.param_nodes.borrow().get(&key) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let var = self.push_node(
            store.get(id).clone(),
            Op::Leaf,
            self.recording && self.params_trainable,
        );
        self.param_nodes.borrow_mut().insert(key, var.id);
        var
    }

    pub(crate) fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let requires_grad = requires_grad && self.recording;
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Exact reverse-mode gradients of a scalar `loss` with respect to every
    /// reachable leaf. A graph can be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        if !self.recording || self.consumed.get() {
            return Err(TensorError::NoRecord);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NotScalar(loss_node.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !matches!(node.op, Op::Leaf) {
                ops::backward(&node.op, &node.value, &g, &nodes, &mut |input, contrib| {
                    if !nodes[input].requires_grad {
                        return;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.map(|data| Tensor::new(node.value.shape(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            grads,
            param_nodes: self.param_nodes.borrow().clone(),
        })
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: HashMap<(u64, usize), usize>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.param_nodes
            .get(&(store.uid(), id.index()))
            .and_then(|&node| self.grads[node].as_ref())
    }

    /// Gradients for every parameter of `store`, in parameter order.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|id| self.param(store, id).cloned())
            .collect()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }
}
