//! Single-use reverse-mode tape.
//!
//! A [`Graph`] records every op as it is evaluated. Leaves are constants,
//! watched inputs, or parameters loaded from a [`ParamRegistry`]. Frozen
//! parameters are plain constants on the tape: gradients flow through the ops
//! that consume them but never accumulate on the parameters themselves.
//! [`Graph::backward`] may be called once per graph.

mod backward;
pub(crate) mod kernels;
mod ops;
pub mod sample;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamRegistry, Tag};
use crate::tensor::{Real, Tensor};

pub use sample::SamplePlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Constant,
    Watched,
    Param { name: String, trainable: bool },
    Op,
}

#[derive(Debug)]
pub(crate) enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Offset(NodeId),
    Square(NodeId),
    MatMul(NodeId, NodeId),
    Reshape(NodeId),
    Gather { input: NodeId, index: Arc<Vec<usize>> },
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Relu(NodeId),
    AvgPool { input: NodeId, k: usize },
    GlobalAvgPool(NodeId),
    AddChannelVec { map: NodeId, vec: NodeId },
    L2NormalizeCols { input: NodeId, inv_norms: Vec<F> },
    Resample { input: NodeId, plan: Arc<SamplePlan> },
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Clamp { input: NodeId, lo: F, hi: F },
    MinMaxNorm { input: NodeId, argmin: usize, argmax: usize, denom: F },
    OffDiagSum(NodeId),
    RowLogSoftmax(NodeId),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    origin: Origin,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, NodeId>,
    consumed: bool,
}

/// Result of [`Graph::backward`]: gradients of trainable parameters by name,
/// plus gradients of watched inputs by node.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    params: BTreeMap<String, Tensor<F>>,
    inputs: BTreeMap<NodeId, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn input(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.inputs.get(&id)
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Multiplies every parameter gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v *= F::of(s);
            }
        }
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, Origin::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn watch(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, Origin::Watched, true)
    }

    /// Loads a registry parameter, cast to this graph's precision. Repeated
    /// requests for the same name return the same node, so a parameter used
    /// in several places accumulates one gradient.
    pub fn param(&mut self, registry: &ParamRegistry, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let p = registry.get(name)?;
        let trainable = p.tag == Tag::Trainable;
        let id = self.leaf(
            p.value.cast(),
            Origin::Param { name: name.to_string(), trainable },
            trainable,
        );
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn leaf(&mut self, value: Tensor<F>, origin: Origin, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, origin, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, origin: Origin::Op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// trainable parameter and watched input the root depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let root_shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NotScalar(root_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);
        let mut out = Gradients::default();

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.origin {
                Origin::Param { name, trainable: true } => {
                    out.params.insert(name.clone(), Tensor::new(node.value.shape(), g)?);
                }
                Origin::Watched => {
                    out.inputs.insert(NodeId(id), Tensor::new(node.value.shape(), g)?);
                }
                Origin::Op => self.backprop(id, g, &mut grads),
                _ => {}
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], id: NodeId, g: Vec<F>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}
