use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Input(String),
    Param(String),
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul(NodeId, NodeId),
    /// `[ci, h, w] * [co, ci, k, k] -> [co, h', w']`, stride 1.
    Conv2d {
        input: NodeId,
        weight: NodeId,
        padding: usize,
    },
    /// `x[c, ..] + b[c]`
    ChannelBias(NodeId, NodeId),
    /// `x[c, ..] * s[c]`
    ChannelScale(NodeId, NodeId),
    MaxPool2(NodeId),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    LeakyRelu(NodeId, f64),
    /// Softmax over axis 0.
    Softmax(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    /// `[c, ..] -> [c]`
    SumSpatial(NodeId),
    Dropout(NodeId, f64),
    /// Per-channel normalisation over the spatial axes of `[c, ..]`.
    InstanceNorm(NodeId, f64),
}

impl Op {
    pub(crate) fn operands(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Input(_) | Param(_) => Vec::new(),
            MatMul(a, b)
            | ChannelBias(a, b)
            | ChannelScale(a, b)
            | Concat(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b) => vec![a, b],
            Conv2d { input, weight, .. } => vec![input, weight],
            MaxPool2(a) | Upsample2(a) | LeakyRelu(a, _) | Softmax(a) | Log(a) | ClampMin(a, _)
            | Scale(a, _) | AddScalar(a, _) | Sum(a) | Mean(a) | SumSpatial(a) | Dropout(a, _)
            | InstanceNorm(a, _) => vec![a],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Input(_) => "input",
            Param(_) => "param",
            MatMul(..) => "matmul",
            Conv2d { .. } => "conv2d",
            ChannelBias(..) => "channel_bias",
            ChannelScale(..) => "channel_scale",
            MaxPool2(_) => "max_pool2",
            Upsample2(_) => "upsample2",
            Concat(..) => "concat",
            LeakyRelu(..) => "leaky_relu",
            Softmax(_) => "softmax",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Log(_) => "log",
            ClampMin(..) => "clamp_min",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Sum(_) => "sum",
            Mean(_) => "mean",
            SumSpatial(_) => "sum_spatial",
            Dropout(..) => "dropout",
            InstanceNorm(..) => "instance_norm",
        }
    }
}

/// Immutable-after-build computation graph.
///
/// Nodes can only reference nodes created before them, so node order is a
/// topological order and the graph is acyclic by construction.
#[derive(Clone, Debug)]
pub struct Graph {
    pub(crate) id: u64,
    pub(crate) nodes: Vec<Op>,
    pub(crate) needs_grad: Vec<bool>,
    pub(crate) params: Vec<(String, Vec<usize>, NodeId)>,
    pub(crate) outputs: BTreeMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            params: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs = match &op {
            Op::Param(_) => true,
            Op::Input(_) => false,
            other => other.operands().iter().any(|o| self.needs_grad[o.0]),
        };
        for o in op.operands() {
            assert!(o.0 < self.nodes.len(), "operand refers to a later node");
        }
        self.nodes.push(op);
        self.needs_grad.push(needs);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_owned()))
    }

    /// Declares a trainable parameter. Parameters are listed in declaration order.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        assert!(
            self.params.iter().all(|(n, _, _)| n != name),
            "duplicate parameter `{name}`"
        );
        let id = self.push(Op::Param(name.to_owned()));
        self.params.push((name.to_owned(), shape.to_vec(), id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, padding: usize) -> NodeId {
        self.push(Op::Conv2d {
            input,
            weight,
            padding,
        })
    }

    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::ChannelBias(x, bias))
    }

    pub fn channel_scale(&mut self, x: NodeId, scale: NodeId) -> NodeId {
        self.push(Op::ChannelScale(x, scale))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2(x))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Upsample2(x))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(x, slope))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        self.push(Op::ClampMin(x, floor))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: NodeId, value: f64) -> NodeId {
        self.push(Op::AddScalar(x, value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn sum_spatial(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumSpatial(x))
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        self.push(Op::Dropout(x, p))
    }

    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.push(Op::InstanceNorm(x, eps))
    }

    pub fn set_output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_owned(), node);
    }

    pub fn output(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnboundInput(format!("no output named `{name}`")))
    }

    /// `(name, shape)` of every parameter in declaration order.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.params
            .iter()
            .map(|(n, s, _)| (n.as_str(), s.as_slice()))
    }

    pub fn inputs(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|op| match op {
            Op::Input(n) => Some(n.as_str()),
            _ => None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_dropout(&self) -> bool {
        self.nodes
            .iter()
            .any(|op| matches!(op, Op::Dropout(_, p) if *p > 0.0))
    }
}
