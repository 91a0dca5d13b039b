//! Minimal reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! addressed by [`Var`] handles; calling [`Tape::backward`] on a scalar node
//! walks the tape in reverse and returns the gradient of every node that
//! requires one. Trainable weights enter the tape through
//! [`Tape::param`], and [`Gradients::param_grads`] routes their gradients
//! back to the owning [`ParamStore`].

mod conv;
mod ops;
mod optim;
mod params;

pub use conv::{conv2d_forward, conv_out_size};
pub use ops::downsample2;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Everything a backward closure may read.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        })
    }

    /// Brings a stored weight onto the tape. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        if store.is_frozen() {
            return self.constant(value);
        }
        self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: Some((store.tag(), id)),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The node only tracks gradients if some parent does.
    pub fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_node = &self.nodes[root.0];
        assert_eq!(root_node.value.len(), 1, "backward root must be a scalar");
        if !root_node.requires_grad {
            return Gradients {
                grads,
                params: Vec::new(),
            }
            .with_params(self);
        }
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Interior gradients were consumed above; what remains belongs to leaves.
        Gradients {
            grads,
            params: Vec::new(),
        }
        .with_params(self)
    }
}

/// Result of [`Tape::backward`]: gradients of leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<(u64, ParamId)>>,
}

impl Gradients {
    fn with_params(mut self, tape: &Tape) -> Self {
        // Parameter leaves with no consumer still get an explicit zero.
        for (i, n) in tape.nodes.iter().enumerate() {
            if n.param.is_some() && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(n.value.shape()));
            }
        }
        self.params = tape.nodes.iter().map(|n| n.param).collect();
        self
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Sums gradients of every tape leaf bound to `store`, indexed by parameter.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = (0..store.len())
            .map(|i| Tensor::zeros(store.value(ParamId(i)).shape()))
            .collect();
        for (param, grad) in self.params.iter().zip(&self.grads) {
            if let (Some((tag, id)), Some(g)) = (param, grad) {
                if *tag == store.tag() {
                    out[id.0].add_assign(g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
