//! Analytic cost measures of an unrolled graph.
//!
//! Only convolutions carry cost; every other node is assumed fused into a
//! neighbouring convolution. All counts are exact integers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{Block, CompGraph, GraphError, GroupSpec, LayerNode, NodeKind};
use crate::tensor::kernels::conv2d_macs;

/// Bytes per stored parameter or activation element.
pub const BYTES_PER_ELEMENT: u64 = 4;
/// Bytes per reported megabyte.
pub const BYTES_PER_MB: f64 = 1e6;

/// MACs of one execution of `node` at batch size 1.
pub fn macs_of_node(node: &LayerNode) -> u64 {
    match node.kind {
        NodeKind::Conv {
            kernel,
            in_c,
            out_c,
            depthwise,
            ..
        } => conv2d_macs(node.shape.h, node.shape.w, in_c, out_c, kernel, depthwise),
        _ => 0,
    }
}

/// Cumulative MACs `x_1..x_N`: everything output `n` depends on, counted
/// once per execution.
pub fn macs_per_output(graph: &CompGraph) -> Vec<u64> {
    (1..=graph.outputs().len())
        .map(|n| {
            graph
                .ancestors_of_output(n)
                .expect("output exists")
                .into_iter()
                .map(|id| macs_of_node(graph.node(id)))
                .sum()
        })
        .collect()
}

fn conv_node_bytes(graph: &CompGraph, node: &LayerNode) -> u64 {
    let spec = node
        .weight_group
        .as_ref()
        .and_then(|g| graph.groups().get(g))
        .expect("conv node has a group");
    let input = graph.node(node.inputs[0]).shape.elements();
    BYTES_PER_ELEMENT * (spec.conv_param_elements() + input + node.shape.elements())
}

/// Bytes of parameters plus input and output feature maps over unique
/// convolution nodes (first node of each weight group), batch size 1.
pub fn graph_memory_bytes(graph: &CompGraph) -> u64 {
    graph_memory_by_block(graph).iter().map(|(_, b)| b).sum()
}

fn graph_memory_by_block(graph: &CompGraph) -> [(Block, u64); 3] {
    let mut seen = BTreeSet::new();
    let mut out = [(Block::Data, 0), (Block::Iterative, 0), (Block::Head, 0)];
    for node in graph.nodes().iter().filter(|n| n.kind.is_conv()) {
        let g = node.weight_group.as_ref().expect("conv node has a group");
        if seen.insert(g) {
            let slot = out
                .iter_mut()
                .find(|(b, _)| *b == node.block)
                .expect("all blocks listed");
            slot.1 += conv_node_bytes(graph, node);
        }
    }
    out
}

/// Trainable elements over unique weight groups (batch-norm running
/// statistics excluded).
pub fn param_count(graph: &CompGraph) -> u64 {
    graph.groups().values().map(GroupSpec::param_elements).sum()
}

/// Longest-path convolution count from the input to each output.
pub fn depth_per_output(graph: &CompGraph) -> Vec<usize> {
    let order = graph.topological_order().expect("validated graph is acyclic");
    let mut depth = vec![0usize; graph.nodes().len()];
    for id in order {
        let n = graph.node(id);
        let d = n.inputs.iter().map(|&i| depth[i]).max().unwrap_or(0);
        depth[id] = d + usize::from(n.kind.is_conv());
    }
    graph.outputs().iter().map(|&o| depth[o]).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputCost {
    pub n: usize,
    pub macs: u64,
    pub depth: usize,
    /// Memory of the graph truncated after output `n`.
    pub graph_bytes: u64,
    /// Parameters of the graph truncated after output `n`.
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    pub params: u64,
    pub graph_bytes: u64,
    /// MACs of one full pass through every node of the block.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub data: BlockCost,
    pub iterative: BlockCost,
    pub heads: BlockCost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub outputs: Vec<OutputCost>,
    pub params: u64,
    pub graph_bytes: u64,
    pub breakdown: Breakdown,
}

impl CostReport {
    pub fn compute(graph: &CompGraph) -> Result<Self, GraphError> {
        let macs = macs_per_output(graph);
        let depth = depth_per_output(graph);
        let mut outputs = Vec::with_capacity(macs.len());
        for (i, (&m, &d)) in macs.iter().zip(&depth).enumerate() {
            let t = graph.truncate(i + 1)?;
            outputs.push(OutputCost {
                n: i + 1,
                macs: m,
                depth: d,
                graph_bytes: graph_memory_bytes(&t),
                params: param_count(&t),
            });
        }
        let mem = graph_memory_by_block(graph);
        let block = |b: Block| {
            let mut params = 0;
            let mut groups = BTreeSet::new();
            let mut macs = 0;
            for n in graph.nodes().iter().filter(|n| n.block == b) {
                macs += macs_of_node(n);
                if let Some(g) = &n.weight_group {
                    if groups.insert(g) {
                        params += graph.groups()[g].param_elements();
                    }
                }
            }
            BlockCost {
                params,
                graph_bytes: mem.iter().find(|(x, _)| *x == b).map(|(_, v)| *v).unwrap_or(0),
                macs,
            }
        };
        Ok(Self {
            outputs,
            params: param_count(graph),
            graph_bytes: graph_memory_bytes(graph),
            breakdown: Breakdown {
                data: block(Block::Data),
                iterative: block(Block::Iterative),
                heads: block(Block::Head),
            },
        })
    }

    pub fn last(&self) -> &OutputCost {
        self.outputs.last().expect("graph has at least one output")
    }

    pub fn graph_mb(&self) -> f64 {
        self.graph_bytes as f64 / BYTES_PER_MB
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data serializes")
    }
}
