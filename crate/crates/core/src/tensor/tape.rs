//! Ordered record of operation applications, replayed in reverse to
//! accumulate gradients.

use super::ops::Op;
use super::{FeatureMap, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: Option<Box<dyn Op>>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Single-threaded evaluation record. Values are computed eagerly on
/// [`apply`](Tape::apply); [`backward`](Tape::backward) walks the nodes in
/// reverse insertion order.
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

    /// Differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: impl Into<Tensor>) -> NodeId {
        self.push(None, Vec::new(), value.into(), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: impl Into<Tensor>) -> NodeId {
        self.push(None, Vec::new(), value.into(), false)
    }

    fn push(&mut self, op: Option<Box<dyn Op>>, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn apply(&mut self, op: impl Op + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply_boxed(Box::new(op), inputs)
    }

    pub fn apply_boxed(&mut self, op: Box<dyn Op>, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = op.forward(&values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Some(op), inputs.to_vec(), value, requires_grad))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn real(&self, id: NodeId) -> &FeatureMap {
        self.nodes[id.0]
            .value
            .as_real()
            .expect("node does not hold a real tensor")
    }

    /// Reverse pass from a scalar root. Returns one gradient slot per node;
    /// slots stay empty for nodes the root does not depend on.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::InvalidArgument("root is not on this tape".into()))?;
        if root_val.value.scalar_count() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        self.backward_from(root, FeatureMap::scalar(1.0).into())
    }

    /// Reverse pass seeded with an arbitrary cotangent laid out like `root`.
    pub fn backward_from(&self, root: NodeId, cotangent: Tensor) -> Result<Gradients> {
        let root_val = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::InvalidArgument("root is not on this tape".into()))?;
        if !root_val.value.same_layout(&cotangent) {
            return Err(Error::shape("backward", "cotangent layout differs from root"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(cotangent);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let input_grads = op.vjp(&inputs, &node.value, &grad, &wants)?;
            for ((input, g), want) in node.inputs.iter().zip(input_grads).zip(&wants) {
                let (Some(g), true) = (g, *want) else { continue };
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("{} (backward)", op.name()),
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the consumed gradient available for callers
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Real gradient of `id`, or zeros shaped like `like` when the root does
    /// not depend on it.
    pub fn real_or_zeros(&self, id: NodeId, like: &FeatureMap) -> FeatureMap {
        match self.get(id).and_then(|g| g.as_real()) {
            Some(g) => g.clone(),
            None => FeatureMap::zeros(like.channels(), like.height(), like.width()),
        }
    }
}
