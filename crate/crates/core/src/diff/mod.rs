//! Deterministic graph evaluation with reverse-mode gradients.
//!
//! A [`Graph`] is an append-only list of primitive nodes. Leaves are named and
//! bound to tensors at evaluation time; leaves created with [`Graph::param`]
//! are differentiated by [`Graph::gradient`], leaves created with
//! [`Graph::input`] are treated as constants.
//!
//! Every node only refers to nodes created before it, so node order is a
//! topological order and evaluation is a single forward sweep.

mod backward;
mod check;
mod cosine;
mod forward;

use std::collections::{BTreeMap, HashMap};

use crate::tensor::Tensor;

pub use check::{GradCheckReport, ParamCheck};
pub use cosine::{cosine_similarity_matrix, CosineMatrix};
pub use forward::Evaluation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// The fixed primitive set. Binary elementwise kinds (`Add`, `Mul`) accept a
/// right operand whose row count divides the left operand's, tiling it down
/// the rows; this covers bias rows and repeated positional tables.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Leaf { name: String, trainable: bool },
    MatMul,
    Add,
    Scale(f64),
    Concat(Axis),
    SliceRows { start: usize, len: usize },
    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine terms.
    LayerNorm { eps: f64 },
    SoftmaxRows,
    Gelu,
    Sigmoid,
    Mean,
    FrobeniusSq,
    CosineSimMatrix,
    /// Natural log of the input clamped to `[lo, hi]`.
    Log { lo: f64, hi: f64 },
    Mul,
    Transpose,
    /// Channels-last 3-D convolution: inputs `x[B,D1,D2,D3,Cin]`,
    /// `w[k1,k2,k3,Cin,Cout]`, `bias[Cout]`.
    Conv3d { stride: usize, padding: usize },
    Reshape(Vec<usize>),
}

impl Primitive {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Primitive::Leaf { .. } => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Scale(_) => "scale",
            Primitive::Concat(_) => "concat",
            Primitive::SliceRows { .. } => "slice-row",
            Primitive::LayerNorm { .. } => "layer-norm",
            Primitive::SoftmaxRows => "softmax-rows",
            Primitive::Gelu => "gelu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Mean => "mean",
            Primitive::FrobeniusSq => "frobenius-sq",
            Primitive::CosineSimMatrix => "cosine-sim-matrix",
            Primitive::Log { .. } => "log",
            Primitive::Mul => "elementwise-mul",
            Primitive::Transpose => "transpose",
            Primitive::Conv3d { .. } => "conv3d",
            Primitive::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Primitive,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Name → tensor bindings for graph leaves. Tensors are borrowed so that
/// large parameter stores are not copied per step.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn with(mut self, name: impl Into<String>, tensor: &'a Tensor) -> Self {
        self.bind(name, tensor);
        self
    }

    pub fn extend<I, K>(&mut self, iter: I)
    where
        I: IntoIterator<Item = (K, &'a Tensor)>,
        K: Into<String>,
    {
        for (k, v) in iter {
            self.map.insert(k.into(), v);
        }
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Primitive, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(
            Primitive::Leaf {
                name: name.to_string(),
                trainable,
            },
            vec![],
        );
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Differentiable named leaf. Repeated calls with one name share a node.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    /// Constant named leaf.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    /// Names of all trainable leaves, in creation order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Primitive::Leaf {
                    name,
                    trainable: true,
                } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Primitive::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Primitive::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Primitive::Scale(c), vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> NodeId {
        self.push(Primitive::Concat(axis), parts.to_vec())
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Primitive::SliceRows { start, len }, vec![a])
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.push(Primitive::LayerNorm { eps }, vec![a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Primitive::SoftmaxRows, vec![a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Primitive::Gelu, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Primitive::Sigmoid, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Primitive::Mean, vec![a])
    }

    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        self.push(Primitive::FrobeniusSq, vec![a])
    }

    pub fn cosine_sim(&mut self, a: NodeId) -> NodeId {
        self.push(Primitive::CosineSimMatrix, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.log_clamped(a, f64::MIN_POSITIVE, f64::INFINITY)
    }

    pub fn log_clamped(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Primitive::Log { lo, hi }, vec![a])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Primitive::Mul, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Primitive::Transpose, vec![a])
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.push(Primitive::Conv3d { stride, padding }, vec![x, w, bias])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Primitive::Reshape(shape.to_vec()), vec![a])
    }

    /// Affine layer `x·w + b` (bias row broadcast).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    pub(crate) fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.op {
            Primitive::Leaf { name, .. } => format!("#{} leaf `{name}`", id.0),
            op => format!("#{} {}", id.0, op.kind_name()),
        }
    }
}

#[cfg(test)]
mod tests;
