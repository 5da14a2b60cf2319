use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) tape: u64,
    pub(crate) id: usize,
}

/// A named trainable tensor. Binding it to a tape yields a leaf that
/// requires gradient; binding the same name twice returns the same leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
    pub(crate) grad: Option<Tensor<T>>,
}

/// Ordered record of executed ops.
///
/// Gradients accumulate across repeated [`Tape::backward`] calls until
/// [`Tape::zero_grad`] is called, mirroring the usual framework contract.
pub struct Tape<T> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that receives gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn bind(&mut self, param: &Param<T>) -> Var {
        if let Some(&v) = self.bound.get(&param.name) {
            return v;
        }
        let v = self.push_leaf(param.value.clone(), true);
        self.bound.insert(param.name.clone(), v);
        v
    }

    /// Makes later [`Tape::bind`] calls for `name` return `var`, so a
    /// parameter can be driven by an existing variable (used by gradient
    /// checks on weights).
    pub fn bind_as(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Constant copy of a parameter's current value (gradient-blocked view).
    pub fn bind_frozen(&mut self, param: &Param<T>) -> Var {
        self.push_leaf(param.value.clone(), false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        })
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Backward(format!(
                "variable {} does not belong to this tape",
                v.id
            )));
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.id {
            return None;
        }
        self.nodes.get(v.id).and_then(|n| n.grad.as_ref())
    }

    pub fn param_grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.bound.get(name).and_then(|&v| self.grad(v))
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Propagates d(loss)/d(node) to every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Vec<T>>> = Vec::new();
        adjoints.resize_with(root + 1, || None);
        adjoints[root] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for id in (0..=root).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            for (input, contrib) in node.op.backward(&self.nodes, id, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut adjoints[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    slot => *slot = Some(contrib),
                }
            }
        }

        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, c)| *a += *c),
                slot => *slot = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }
}
