//! First-order model of a streaming accelerator whose on-chip memory must
//! hold the unique graph.
//!
//! When the graph fits, samples stream through one pipelined stage per
//! convolution: latency is `depth · t_layer` and a new sample enters every
//! `t_layer`. Otherwise the unique convolutions are cut into `P` contiguous
//! partitions of roughly equal bytes and the accelerator is reprogrammed
//! whenever execution moves to a convolution held by another partition.
//! With `B` samples kept resident per reprogramming, one batch costs
//! `loads · t_reconfig + (depth + loads · (B − 1)) · t_layer`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{graph_memory_bytes, CostReport, BYTES_PER_ELEMENT};
use crate::graph::{CompGraph, GroupId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// On-chip memory in bytes (`f64::INFINITY` for unbounded).
    pub capacity_bytes: f64,
    pub t_layer: f64,
    pub t_reconfig: f64,
    /// Samples processed per partition residency.
    pub batch: u64,
}

impl SimConfig {
    pub fn new(capacity_bytes: f64, t_layer: f64, t_reconfig: f64) -> Self {
        Self {
            capacity_bytes,
            t_layer,
            t_reconfig,
            batch: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |v: f64| v > 0.0 && !v.is_nan();
        if !ok(self.capacity_bytes) {
            return Err(SimError::Config("capacity_bytes", self.capacity_bytes));
        }
        if !(ok(self.t_layer) && self.t_layer.is_finite()) {
            return Err(SimError::Config("t_layer", self.t_layer));
        }
        if !(ok(self.t_reconfig) && self.t_reconfig.is_finite()) {
            return Err(SimError::Config("t_reconfig", self.t_reconfig));
        }
        if self.batch == 0 {
            return Err(SimError::Config("batch", 0.0));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("{0} must be positive, got {1}")]
    Config(&'static str, f64),
    #[error("cost report does not belong to this graph")]
    CostMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub fits: bool,
    pub graph_bytes: u64,
    /// Time until output `n` is available, per output.
    pub latency: Vec<f64>,
    /// Samples per time unit in steady state.
    pub throughput: f64,
    pub partitions: u64,
    /// Reprogrammings per batch.
    pub partition_loads: u64,
    /// Share of batch time spent reprogramming.
    pub reconfig_fraction: f64,
}

/// Partition index of each unique weight group.
fn partition_of_groups(graph: &CompGraph, partitions: u64, total: u64) -> BTreeMap<GroupId, u64> {
    let mut out = BTreeMap::new();
    let mut cum = 0u64;
    for node in graph.nodes().iter().filter(|n| n.kind.is_conv()) {
        let g = node.weight_group.clone().expect("conv node has a group");
        if out.contains_key(&g) {
            continue;
        }
        let p = ((cum as u128 * partitions as u128) / total.max(1) as u128) as u64;
        out.insert(g.clone(), p.min(partitions - 1));
        let spec = &graph.groups()[&g];
        let fmap = graph.node(node.inputs[0]).shape.elements() + node.shape.elements();
        cum += BYTES_PER_ELEMENT * (spec.conv_param_elements() + fmap);
    }
    out
}

pub fn simulate(graph: &CompGraph, cost: &CostReport, cfg: SimConfig) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let bytes = graph_memory_bytes(graph);
    if bytes != cost.graph_bytes || cost.outputs.len() != graph.outputs().len() {
        return Err(SimError::CostMismatch);
    }
    let depth: Vec<f64> = cost.outputs.iter().map(|o| o.depth as f64).collect();
    let depth_n = *depth.last().expect("at least one output");
    if bytes as f64 <= cfg.capacity_bytes {
        return Ok(SimReport {
            fits: true,
            graph_bytes: bytes,
            latency: depth.iter().map(|d| d * cfg.t_layer).collect(),
            throughput: 1.0 / cfg.t_layer,
            partitions: 1,
            partition_loads: 0,
            reconfig_fraction: 0.0,
        });
    }
    let partitions = (bytes as f64 / cfg.capacity_bytes).ceil() as u64;
    let part = partition_of_groups(graph, partitions, bytes);
    // walk convolutions in execution order, counting partition switches
    let mut loaded: Option<u64> = None;
    let mut loads = 0u64;
    let mut loads_at = vec![0u64; graph.outputs().len()];
    let mut next_out = 0;
    for node in graph.nodes() {
        if let Some(g) = &node.weight_group {
            if node.kind.is_conv() {
                let p = part[g];
                if loaded != Some(p) {
                    loads += 1;
                    loaded = Some(p);
                }
            }
        }
        if graph.outputs().get(next_out) == Some(&node.id) {
            loads_at[next_out] = loads;
            next_out += 1;
        }
    }
    let latency = depth
        .iter()
        .zip(&loads_at)
        .map(|(d, &l)| d * cfg.t_layer + l as f64 * cfg.t_reconfig)
        .collect();
    let b = cfg.batch as f64;
    let reconfig = loads as f64 * cfg.t_reconfig;
    let batch_time = reconfig + (depth_n + loads as f64 * (b - 1.0)) * cfg.t_layer;
    Ok(SimReport {
        fits: false,
        graph_bytes: bytes,
        latency,
        throughput: b / batch_time,
        partitions,
        partition_loads: loads,
        reconfig_fraction: reconfig / batch_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{build_itnet, HyperParams};

    fn setup(shared: bool) -> (CompGraph, CostReport) {
        let g = build_itnet(&HyperParams::new(3, 6, 1, 16, 11, 96, 128, shared)).unwrap();
        let c = CostReport::compute(&g).unwrap();
        (g, c)
    }

    #[test]
    fn unbounded_memory_streams() {
        let (g, c) = setup(true);
        let r = simulate(&g, &c, SimConfig::new(f64::INFINITY, 2.0, 100.0)).unwrap();
        assert!(r.fits);
        assert_eq!(r.throughput, 0.5);
        assert_eq!(r.latency[5], 2.0 * c.outputs[5].depth as f64);
        assert_eq!(r.partitions, 1);
        assert_eq!(r.reconfig_fraction, 0.0);
    }

    #[test]
    fn shrinking_capacity_lowers_throughput() {
        for shared in [true, false] {
            let (g, c) = setup(shared);
            let full = simulate(&g, &c, SimConfig::new(c.graph_bytes as f64, 1.0, 50.0)).unwrap();
            let mut prev = full.throughput;
            let mut cap = c.graph_bytes as f64;
            for _ in 0..4 {
                cap /= 2.0;
                let r = simulate(&g, &c, SimConfig::new(cap, 1.0, 50.0)).unwrap();
                assert!(!r.fits);
                assert!(r.throughput < prev, "shared={shared} cap={cap}");
                assert!(r.latency.windows(2).all(|w| w[0] <= w[1]));
                prev = r.throughput;
            }
        }
    }

    #[test]
    fn independent_graph_loads_each_partition_once() {
        let (g, c) = setup(false);
        let r = simulate(&g, &c, SimConfig::new(c.graph_bytes as f64 / 3.5, 1.0, 10.0)).unwrap();
        assert_eq!(r.partitions, 4);
        assert_eq!(r.partition_loads, 4);
    }

    #[test]
    fn rejects_bad_config() {
        let (g, c) = setup(true);
        assert!(simulate(&g, &c, SimConfig::new(0.0, 1.0, 1.0)).is_err());
        assert!(simulate(&g, &c, SimConfig::new(1e9, -1.0, 1.0)).is_err());
    }
}
