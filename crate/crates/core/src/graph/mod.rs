//! Unrolled computational graph with weight-sharing annotations.
//!
//! Loops are stored unrolled. Nodes that reuse one parameter set carry the
//! same [`GroupId`]; every cost metric and the executor read this one
//! representation.

pub mod exec;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::HyperParams;

pub use exec::{execute, ExecMode, ForwardPass};

pub type NodeId = usize;

/// Identifier of a parameter set; nodes with equal ids share weights.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub String);

impl GroupId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Per-sample feature-map extent (batch excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FeatureShape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn elements(&self) -> u64 {
        (self.h * self.w * self.c) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Conv {
        kernel: usize,
        stride: usize,
        in_c: usize,
        out_c: usize,
        depthwise: bool,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Concat,
    Add,
    MaxPool {
        size: usize,
        stride: usize,
    },
    ResizeBilinear {
        out_h: usize,
        out_w: usize,
    },
    Dropout {
        rate: f64,
    },
    Output {
        index: usize,
    },
}

impl NodeKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, NodeKind::Conv { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(self, NodeKind::Conv { .. } | NodeKind::BatchNorm { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv { .. } => "conv",
            NodeKind::BatchNorm { .. } => "batch_norm",
            NodeKind::Relu => "relu",
            NodeKind::Concat => "concat",
            NodeKind::Add => "add",
            NodeKind::MaxPool { .. } => "max_pool",
            NodeKind::ResizeBilinear { .. } => "resize_bilinear",
            NodeKind::Dropout { .. } => "dropout",
            NodeKind::Output { .. } => "output",
        }
    }
}

/// Which part of the network a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Data,
    Iterative,
    Head,
}

/// Parameter tensors a group owns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GroupSpec {
    Conv {
        kernel: usize,
        in_c: usize,
        out_c: usize,
        depthwise: bool,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
}

impl GroupSpec {
    fn of(kind: &NodeKind) -> Option<Self> {
        match *kind {
            NodeKind::Conv {
                kernel,
                in_c,
                out_c,
                depthwise,
                bias,
                ..
            } => Some(GroupSpec::Conv {
                kernel,
                in_c,
                out_c,
                depthwise,
                bias,
            }),
            NodeKind::BatchNorm { channels } => Some(GroupSpec::BatchNorm { channels }),
            _ => None,
        }
    }

    /// `(name, shape)` of each trainable tensor.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            GroupSpec::Conv {
                kernel,
                in_c,
                out_c,
                depthwise,
                bias,
            } => {
                let w = if depthwise {
                    vec![kernel, kernel, in_c, 1]
                } else {
                    vec![kernel, kernel, in_c, out_c]
                };
                let mut v = vec![("weight", w)];
                if bias {
                    v.push(("bias", vec![out_c]));
                }
                v
            }
            GroupSpec::BatchNorm { channels } => vec![("gamma", vec![channels]), ("beta", vec![channels])],
        }
    }

    pub fn param_elements(&self) -> u64 {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Elements of the convolution weights and bias (zero for batch norm).
    pub fn conv_param_elements(&self) -> u64 {
        match self {
            GroupSpec::Conv { .. } => self.param_elements(),
            GroupSpec::BatchNorm { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub weight_group: Option<GroupId>,
    /// 0 for the data block, `n` for iteration `n` and its head.
    pub iteration: usize,
    /// 1-based scale index, where meaningful.
    pub scale: Option<usize>,
    pub block: Block,
    pub shape: FeatureShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub input: FeatureShape,
    pub classes: usize,
    pub hparams: Option<HyperParams>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph contains a cycle through node {0}")]
    Cycle(NodeId),
    #[error("node {node} reads from missing node {input}")]
    DanglingInput { node: NodeId, input: NodeId },
    #[error("node at position {position} has id {id}")]
    BadId { position: usize, id: NodeId },
    #[error("node {0} is not reachable from the input")]
    Unreachable(NodeId),
    #[error("expected {expected} output nodes, found {found}")]
    OutputCount { expected: usize, found: usize },
    #[error("group {group}: node {node} disagrees with the group's parameter shapes")]
    GroupConflict { group: GroupId, node: NodeId },
    #[error("node {0} has parameters but no weight group")]
    MissingGroup(NodeId),
    #[error("graph must have exactly one input node, found {0}")]
    InputCount(usize),
    #[error("no output {0} in graph")]
    NoSuchOutput(usize),
}

/// Immutable unrolled graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompGraph {
    nodes: Vec<LayerNode>,
    /// Output node ids in iteration order.
    outputs: Vec<NodeId>,
    groups: BTreeMap<GroupId, GroupSpec>,
    meta: GraphMeta,
}

impl CompGraph {
    /// Validates and freezes a node list. Node ids must equal positions.
    pub fn new(nodes: Vec<LayerNode>, outputs: Vec<NodeId>, meta: GraphMeta) -> Result<Self, GraphError> {
        for (position, n) in nodes.iter().enumerate() {
            if n.id != position {
                return Err(GraphError::BadId { position, id: n.id });
            }
            for &i in &n.inputs {
                if i >= nodes.len() {
                    return Err(GraphError::DanglingInput { node: n.id, input: i });
                }
            }
        }
        let mut groups: BTreeMap<GroupId, GroupSpec> = BTreeMap::new();
        for n in &nodes {
            match (&n.weight_group, GroupSpec::of(&n.kind)) {
                (Some(g), Some(spec)) => {
                    if let Some(prev) = groups.get(g) {
                        if *prev != spec {
                            return Err(GraphError::GroupConflict {
                                group: g.clone(),
                                node: n.id,
                            });
                        }
                    } else {
                        groups.insert(g.clone(), spec);
                    }
                }
                (None, Some(_)) => return Err(GraphError::MissingGroup(n.id)),
                (Some(g), None) => {
                    return Err(GraphError::GroupConflict {
                        group: g.clone(),
                        node: n.id,
                    })
                }
                (None, None) => {}
            }
        }
        let g = Self {
            nodes,
            outputs,
            groups,
            meta,
        };
        if !g.nodes.is_empty() {
            g.check_structure()?;
        }
        Ok(g)
    }

    fn check_structure(&self) -> Result<(), GraphError> {
        let inputs: Vec<_> = self.nodes.iter().filter(|n| n.kind == NodeKind::Input).collect();
        if inputs.len() != 1 {
            return Err(GraphError::InputCount(inputs.len()));
        }
        let order = self.topological_order()?;
        let mut reached = vec![false; self.nodes.len()];
        for id in order {
            let n = &self.nodes[id];
            reached[id] = n.kind == NodeKind::Input || n.inputs.iter().any(|&i| reached[i]);
            if !reached[id] {
                return Err(GraphError::Unreachable(id));
            }
        }
        let found = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Output { .. }))
            .count();
        if found != self.outputs.len() {
            return Err(GraphError::OutputCount {
                expected: self.outputs.len(),
                found,
            });
        }
        if let Some(hp) = &self.meta.hparams {
            if self.outputs.len() != hp.n {
                return Err(GraphError::OutputCount {
                    expected: hp.n,
                    found: self.outputs.len(),
                });
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn groups(&self) -> &BTreeMap<GroupId, GroupSpec> {
        &self.groups
    }

    pub fn meta(&self) -> &GraphMeta {
        &self.meta
    }

    pub fn hparams(&self) -> Option<&HyperParams> {
        self.meta.hparams.as_ref()
    }

    pub fn input_node(&self) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Input).map(|n| n.id)
    }

    /// Kahn's algorithm, always emitting the smallest ready id first.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for node in &self.nodes {
            for &i in &node.inputs {
                indegree[node.id] += 1;
                consumers[i].push(node.id);
            }
        }
        let mut ready: BinaryHeap<Reverse<NodeId>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &c in &consumers[id] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// One entry per distinct weight group with its parameter shapes.
    pub fn unique_weight_groups(&self) -> BTreeMap<GroupId, Vec<(&'static str, Vec<usize>)>> {
        self.groups
            .iter()
            .map(|(g, spec)| (g.clone(), spec.param_shapes()))
            .collect()
    }

    /// Ids of every node that output `n` (1-based) depends on, itself included.
    pub fn ancestors_of_output(&self, n: usize) -> Result<Vec<NodeId>, GraphError> {
        let out = *self.outputs.get(n.wrapping_sub(1)).ok_or(GraphError::NoSuchOutput(n))?;
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![out];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                continue;
            }
            stack.extend(self.nodes[id].inputs.iter().copied());
        }
        Ok((0..self.nodes.len()).filter(|&i| seen[i]).collect())
    }

    /// The node prefix ending at output `n`, ids and groups unchanged.
    pub fn truncate(&self, n: usize) -> Result<CompGraph, GraphError> {
        let last = *self.outputs.get(n.wrapping_sub(1)).ok_or(GraphError::NoSuchOutput(n))?;
        // construction order puts everything output n needs before it
        let nodes = self.nodes[..=last].to_vec();
        let mut meta = self.meta.clone();
        if let Some(hp) = &mut meta.hparams {
            hp.n = n;
        }
        CompGraph::new(nodes, self.outputs[..n].to_vec(), meta)
    }

    /// Directed edges `(from, to, shape carried)` in node order.
    pub fn edges(&self) -> Vec<Edge> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.inputs.iter().map(move |&i| Edge {
                    from: i,
                    to: n.id,
                    shape: self.nodes[i].shape,
                })
            })
            .collect()
    }

    /// JSON document with nodes, edges, groups and outputs.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "meta": self.meta,
            "nodes": self.nodes,
            "edges": self.edges(),
            "groups": self.groups,
            "outputs": self.outputs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub shape: FeatureShape,
}
