//! Reverse-mode automatic differentiation on a tape of `ndarray` values.
//!
//! Every forward operation appends a node holding its output value and a
//! backward closure. [`Tape::backward`] walks the nodes in reverse insertion
//! order (parents always precede children, so insertion order is already
//! topological) and accumulates gradients. [`Tape::detach`] re-enters a value
//! as a fresh leaf, which is what blocks gradient flow from the teacher
//! branch into the shared detector.
//!
//! Values are `f64` throughout: desk-scale models are small, and the
//! finite-difference gradient checks in the test suite need double precision.

pub mod gradcheck;
mod ops;

pub use ops::Roi;
pub(crate) use ops::softmax2;

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};

use crate::nn::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Context handed to a backward closure.
pub(crate) struct BackwardCtx<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a ArrayD<f64>,
    /// Parent values, in the order they were passed to the op.
    pub inputs: &'a [&'a ArrayD<f64>],
    /// This node's forward output.
    pub output: &'a ArrayD<f64>,
    /// Which parents need gradients at all.
    pub needs: &'a [bool],
}

type BackFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<NodeId>,
    backward: Option<BackFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A single-use computation graph. Build one per forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward closures are dropped.
    /// Used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        NodeId(nodes.len() - 1)
    }

    /// Differentiable leaf (e.g. an input under gradient check).
    pub fn leaf(&self, value: ArrayD<f64>) -> NodeId {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
            param: None,
        })
    }

    /// Non-differentiable leaf (targets, lookup tables, anchors, ...).
    pub fn constant(&self, value: ArrayD<f64>) -> NodeId {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Lease a parameter from the store onto the tape.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Node {
            value: store.value(id).clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
            param: Some(id),
        })
    }

    /// Value identical to `x`, but gradients stop here.
    pub fn detach(&self, x: NodeId) -> NodeId {
        let value = self.value(x);
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Clone of the node's value.
    pub fn value(&self, id: NodeId) -> ArrayD<f64> {
        self.nodes.borrow()[id.0].value.clone()
    }

    /// Apply `f` to the node's value without cloning it.
    pub fn with_value<R>(&self, id: NodeId, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.nodes.borrow()[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let nodes = self.nodes.borrow();
        let v = &nodes[id.0].value;
        assert!(
            v.len() == 1,
            "scalar() on node with {} elements",
            v.len()
        );
        v.iter().copied().next().unwrap()
    }

    fn requires_grad_of(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|id| nodes[id.0].requires_grad)
    }

    /// Record an op node. `backward` receives the output gradient and parent
    /// values and returns one gradient per parent (None where not needed).
    pub(crate) fn op(
        &self,
        value: ArrayD<f64>,
        parents: Vec<NodeId>,
        backward: BackFn,
    ) -> NodeId {
        let requires = self.grad_enabled && self.requires_grad_of(&parents);
        self.push(Node {
            value,
            parents: if requires { parents } else { Vec::new() },
            backward: if requires { Some(backward) } else { None },
            requires_grad: requires,
            param: None,
        })
    }

    /// Run backpropagation from a scalar root. Returns gradients for every
    /// reached node; unreached nodes have gradient zero by definition.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[root.0].value.len() == 1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            let Some(back) = &node.backward else {
                continue;
            };
            let grad = grads[i].take().unwrap();
            let inputs: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|p| &nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| nodes[p.0].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(
                    pg.shape(),
                    nodes[parent.0].value.shape(),
                    "gradient shape mismatch for parent node"
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Leaf/param gradients stay resident in `grads` for collection.
            if node.param.is_some() {
                grads[i] = Some(grad);
            }
        }

        let param_slots: Vec<(ParamId, usize)> = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Gradients {
            slots: grads,
            param_slots,
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<ArrayD<f64>>>,
    param_slots: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient w.r.t. an arbitrary node. `None` means the node was never
    /// reached: its gradient is exactly zero.
    pub fn wrt(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Gradient w.r.t. a parameter, summed over all tape leases of it.
    /// `None` when no gradient reached the parameter (i.e. it is exactly 0).
    pub fn param_grad(&self, id: ParamId) -> Option<ArrayD<f64>> {
        let mut acc: Option<ArrayD<f64>> = None;
        for (pid, slot) in &self.param_slots {
            if *pid != id {
                continue;
            }
            if let Some(g) = &self.slots[*slot] {
                match &mut acc {
                    Some(a) => *a += g,
                    none => *none = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// All parameters that received a nonzero-capable gradient slot.
    pub fn touched_params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self
            .param_slots
            .iter()
            .filter(|(_, slot)| self.slots[*slot].is_some())
            .map(|(pid, _)| *pid)
            .collect();
        out.sort_by_key(|p| p.index());
        out.dedup();
        out
    }
}

/// Convenience: wrap a scalar into a 0-d array.
pub fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

#[cfg(test)]
mod tests;
