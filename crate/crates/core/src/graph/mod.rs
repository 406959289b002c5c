//! Reverse-mode differentiation on an explicitly recorded graph.
//!
//! Each operation appends a node holding its value and a backward rule that
//! maps the node's incoming gradient to gradient contributions for its
//! parents. `backward` on a scalar root replays the rules in reverse,
//! summing contributions into each node's gradient buffer. Graphs are
//! single-use: one forward, at most one backward, then dropped.
//!
//! Values are finite-checked at operation boundaries in debug/test builds.

mod elementwise;
mod linalg;
mod reduce;
mod shape_ops;
mod special;

pub use elementwise::Activation;

use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type Rule<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<(usize, Tensor<T>)>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    rule: Option<Rule<T>>,
}

/// Recorded computation graph over `Tensor<T>`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Register an input or parameter leaf. Gradients accumulate here.
    /// Leaves skip the finite check: malformed input is reported by the
    /// first operation that consumes it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_rc(Rc::new(value), None)
    }

    /// Register a non-differentiable constant (masks, labels, bias indices).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_rc(Rc::new(value), None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub(crate) fn push(&mut self, op: &'static str, value: Tensor<T>, rule: Option<Rule<T>>) -> Var {
        debug_assert!(value.all_finite(), "non-finite values produced by {op}");
        let _ = op;
        self.push_rc(Rc::new(value), rule)
    }

    pub(crate) fn push_rc(&mut self, value: Rc<Tensor<T>>, rule: Option<Rule<T>>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, rule });
        Var(id)
    }

    /// Test-only hook: append a node with an arbitrary backward rule.
    /// Used by the gradient-check negative control.
    #[doc(hidden)]
    pub fn push_custom(
        &mut self,
        value: Tensor<T>,
        rule: impl FnOnce(&Tensor<T>) -> Vec<(usize, Tensor<T>)> + 'static,
    ) -> Var {
        self.push("custom", value, Some(Box::new(rule)))
    }

    /// Reverse sweep from a scalar root. Accumulates (sums) gradients into
    /// every reachable node; a second call without a fresh graph is an error.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::ones(root_val.shape()));
        for id in (0..=root.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            let rule = match self.nodes[id].rule.take() {
                Some(r) => r,
                None => continue,
            };
            let g = self.grads[id].take().expect("grad present");
            let contribs = rule(&g);
            self.grads[id] = Some(g);
            for (pid, contrib) in contribs {
                debug_assert!(pid < id, "backward rule must point to earlier nodes");
                debug_assert_eq!(
                    contrib.shape(),
                    self.nodes[pid].value.shape(),
                    "gradient shape must equal value shape"
                );
                match &mut self.grads[pid] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated at `v` by the last `backward` call, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
