//! Forward execution of a [`CompGraph`] on a [`GradTape`].

use std::collections::BTreeMap;

use thiserror::Error;

use super::{CompGraph, GroupId, NodeId, NodeKind};
use crate::builder::{GroupParams, ParamError, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::kernels::{dropout_key, BnConfig, ConvSpec, Mode};
use crate::tensor::{GradTape, Padding, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Running batch-norm statistics, no dropout, values freed once consumed.
    Infer,
    /// Batch statistics and a recording tape. Dropout masks are keyed by
    /// `(seed, node id, step)`.
    Train { dropout: bool, seed: u64, step: u64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("node {node} ({op}): {source}")]
    Node {
        node: NodeId,
        op: &'static str,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("input has shape {actual:?}, graph expects [batch, {h}, {w}, {c}]")]
    InputShape {
        actual: Vec<usize>,
        h: usize,
        w: usize,
        c: usize,
    },
}

/// Batch statistics one batch-norm node observed during a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation<T> {
    pub node: NodeId,
    pub group: GroupId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Result of one forward pass.
pub struct ForwardPass<T> {
    pub tape: GradTape<T>,
    /// Logits variable of every output, in output order.
    pub outputs: Vec<Var>,
    /// One leaf per `(group, tensor name)`; shared groups reuse the leaf.
    pub params: BTreeMap<(GroupId, &'static str), Var>,
    /// Batch statistics in node order (training mode only).
    pub bn_stats: Vec<BnObservation<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn output(&self, index: usize) -> Result<&Tensor<T>, TensorError> {
        self.tape.value(self.outputs[index])
    }

    /// Folds the observed batch statistics into the running statistics,
    /// in node order (a shared group is updated once per use).
    pub fn update_running_stats(&self, params: &mut ParamStore<T>, cfg: BnConfig) -> Result<(), ParamError> {
        for obs in &self.bn_stats {
            if let GroupParams::BatchNorm { running, .. } = params.group_mut(&obs.group)? {
                running.update(&obs.mean, &obs.var, cfg.momentum);
            }
        }
        Ok(())
    }
}

struct Leaves<'p, T> {
    store: &'p ParamStore<T>,
    vars: BTreeMap<(GroupId, &'static str), Var>,
}

impl<T: Scalar> Leaves<'_, T> {
    fn get(&mut self, tape: &mut GradTape<T>, group: &GroupId, name: &'static str) -> Result<Var, ExecError> {
        if let Some(&v) = self.vars.get(&(group.clone(), name)) {
            return Ok(v);
        }
        let t = self
            .store
            .group(group)?
            .get(name)
            .ok_or_else(|| ParamError::MissingTensor {
                group: group.clone(),
                name: name.to_string(),
            })?;
        let v = tape.leaf(t.clone());
        self.vars.insert((group.clone(), name), v);
        Ok(v)
    }
}

/// Runs `graph` on a `[batch, h, w, 3]` input.
pub fn execute<T: Scalar>(
    graph: &CompGraph,
    input: &Tensor<T>,
    params: &ParamStore<T>,
    mode: ExecMode,
) -> Result<ForwardPass<T>, ExecError> {
    let want = graph.meta().input;
    let shape_ok = input.rank() == 4 && input.shape()[1..] == [want.h, want.w, want.c];
    if !shape_ok {
        return Err(ExecError::InputShape {
            actual: input.shape().to_vec(),
            h: want.h,
            w: want.w,
            c: want.c,
        });
    }
    params.check(graph)?;

    let training = matches!(mode, ExecMode::Train { .. });
    let mut tape = if training {
        GradTape::new()
    } else {
        GradTape::non_recording()
    };
    let mut leaves = Leaves {
        store: params,
        vars: BTreeMap::new(),
    };
    let mut remaining = vec![0usize; graph.nodes().len()];
    for n in graph.nodes() {
        for &i in &n.inputs {
            remaining[i] += 1;
        }
    }
    let eps = BnConfig::default().eps;
    let mut vars: Vec<Option<Var>> = vec![None; graph.nodes().len()];
    let mut outputs = Vec::with_capacity(graph.outputs().len());
    let mut bn_stats = Vec::new();

    let order = graph.topological_order().expect("validated graph is acyclic");
    for id in order {
        let node = graph.node(id);
        let ins: Vec<Var> = node
            .inputs
            .iter()
            .map(|&i| vars[i].expect("inputs run first"))
            .collect();
        let ctx = |source| ExecError::Node {
            node: id,
            op: node.kind.name(),
            source,
        };
        let group = node.weight_group.as_ref();
        let v = match node.kind {
            NodeKind::Input => tape.leaf(input.clone()),
            NodeKind::Conv {
                stride,
                depthwise,
                bias,
                ..
            } => {
                let g = group.expect("validated conv has a group");
                let w = leaves.get(&mut tape, g, "weight")?;
                let b = if bias {
                    Some(leaves.get(&mut tape, g, "bias")?)
                } else {
                    None
                };
                let spec = ConvSpec {
                    stride,
                    padding: Padding::Same,
                    depthwise,
                };
                tape.conv2d(ins[0], w, b, spec).map_err(ctx)?
            }
            NodeKind::BatchNorm { .. } => {
                let g = group.expect("validated batch norm has a group");
                let gamma = leaves.get(&mut tape, g, "gamma")?;
                let beta = leaves.get(&mut tape, g, "beta")?;
                if training {
                    let (v, mean, var) = tape.batch_norm(ins[0], gamma, beta, None, eps).map_err(ctx)?;
                    bn_stats.push(BnObservation {
                        node: id,
                        group: g.clone(),
                        mean,
                        var,
                    });
                    v
                } else {
                    let GroupParams::BatchNorm { running, .. } = params.group(g)? else {
                        unreachable!("checked against graph")
                    };
                    let stats = Some((&running.mean, &running.var));
                    tape.batch_norm(ins[0], gamma, beta, stats, eps).map_err(ctx)?.0
                }
            }
            NodeKind::Relu => tape.relu(ins[0]).map_err(ctx)?,
            NodeKind::Add => tape.add(ins[0], ins[1]).map_err(ctx)?,
            NodeKind::Concat => tape.concat(&ins).map_err(ctx)?,
            NodeKind::MaxPool { size, stride } => tape.max_pool(ins[0], size, stride).map_err(ctx)?,
            NodeKind::ResizeBilinear { out_h, out_w } => tape.resize(ins[0], out_h, out_w).map_err(ctx)?,
            NodeKind::Dropout { rate } => match mode {
                ExecMode::Train {
                    dropout: true,
                    seed,
                    step,
                } => tape
                    .dropout(ins[0], rate, dropout_key(seed, id as u64, step), Mode::Train)
                    .map_err(ctx)?,
                _ => ins[0],
            },
            NodeKind::Output { .. } => {
                outputs.push(ins[0]);
                ins[0]
            }
        };
        vars[id] = Some(v);
        if !training {
            for &i in &node.inputs {
                remaining[i] -= 1;
                let pinned = matches!(node.kind, NodeKind::Output { .. } | NodeKind::Dropout { .. })
                    || vars[i] == Some(v)
                    || outputs.contains(&vars[i].expect("ran"));
                if remaining[i] == 0 && !pinned {
                    tape.release(vars[i].expect("ran"));
                }
            }
        }
    }
    Ok(ForwardPass {
        tape,
        outputs,
        params: leaves.vars,
        bn_stats,
    })
}
