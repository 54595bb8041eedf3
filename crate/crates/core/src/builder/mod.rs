//! Construction of the iterative network graph from [`HyperParams`].
//!
//! Layout per sample:
//!
//! * data block: two ENet-style downsampling stages (strided 3×3 conv
//!   concatenated with 2×2 max-pool, then BN+ReLU) followed by a chain of
//!   strided 3×3 convs; scale `l` is taken after `l` chain convs and sits at
//!   `1/(8·2^(l−1))` of the input.
//! * iteration `n`: per-scale BN on the fed-back maps (never shared), then
//!   per scale a mixing residual block over all resized scales (skipped for
//!   `n = 1`) and `K` bottleneck residual blocks.
//! * head `n`: all scales resized to the finest, concatenated, 1×1 conv to
//!   `C` logits with bias, bilinear ×8 upsample.

mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Block, CompGraph, FeatureShape, GraphError, GraphMeta, GroupId, LayerNode, NodeId, NodeKind};

pub use params::{GroupParams, ParamError, ParamStore};

/// Expansion factor of the bottleneck residual blocks.
pub const EXPANSION: usize = 6;
/// Stride (and pool size) of the two data-block downsampling stages.
pub const DATA_STRIDE: usize = 2;
/// Upsampling factor of the classification heads.
pub const HEAD_UPSAMPLE: usize = 8;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Number of scales.
    #[serde(rename = "L")]
    pub l: usize,
    /// Number of iterations (and outputs).
    #[serde(rename = "N")]
    pub n: usize,
    /// Bottleneck residual blocks per scale and iteration.
    #[serde(rename = "K")]
    pub k: usize,
    /// Channel width.
    pub f: usize,
    /// Number of classes.
    #[serde(rename = "C")]
    pub classes: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Tie iterative-block weights across iterations.
    pub shared: bool,
    /// Rate of the dropout layers after the depthwise convs; they are only
    /// active when training enables dropout.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("invalid hyperparameter {name} = {value}: {reason}")]
    Invalid {
        name: &'static str,
        value: String,
        reason: &'static str,
    },
    #[error("node {node}: {what} mismatch ({lhs} vs {rhs})")]
    Shape {
        node: NodeId,
        what: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl HyperParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        l: usize,
        n: usize,
        k: usize,
        f: usize,
        classes: usize,
        input_h: usize,
        input_w: usize,
        shared: bool,
    ) -> Self {
        Self {
            l,
            n,
            k,
            f,
            classes,
            input_h,
            input_w,
            shared,
            dropout: default_dropout(),
        }
    }

    /// Width of the mixing block's inner conv and of the data-block convs.
    pub fn f_r(&self) -> usize {
        self.f.div_ceil(2)
    }

    pub fn expanded(&self) -> usize {
        EXPANSION * self.f
    }

    pub fn validate(&self) -> Result<(), BuildError> {
        let invalid = |name, value: usize, reason| {
            Err(BuildError::Invalid {
                name,
                value: value.to_string(),
                reason,
            })
        };
        if self.l == 0 {
            return invalid("L", self.l, "at least one scale is required");
        }
        if self.n == 0 {
            return invalid("N", self.n, "at least one iteration is required");
        }
        if self.f < 2 {
            return invalid("f", self.f, "width must be at least 2");
        }
        if !(2..=255).contains(&self.classes) {
            return invalid(
                "C",
                self.classes,
                "class count must be in 2..=255 (255 is the ignore label)",
            );
        }
        for (name, v) in [("input_h", self.input_h), ("input_w", self.input_w)] {
            if v == 0 || v % HEAD_UPSAMPLE != 0 {
                return invalid(name, v, "input extents must be positive multiples of 8");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(BuildError::Invalid {
                name: "dropout",
                value: self.dropout.to_string(),
                reason: "rate must be in [0, 1)",
            });
        }
        Ok(())
    }

    /// Spatial extent of scale `l` (1-based), using same-padding arithmetic.
    pub fn scale_extent(&self, l: usize) -> (usize, usize) {
        let steps = 2 + l;
        let mut h = self.input_h;
        let mut w = self.input_w;
        for _ in 0..steps {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Conv depth of the deepest path to output `n`.
    pub fn depth_to_output(&self, n: usize) -> usize {
        (2 + self.l) + 3 * self.k + (n - 1) * (2 + 3 * self.k) + 1
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn with_f(&self, f: usize) -> Self {
        Self { f, ..self.clone() }
    }

    pub fn with_shared(&self, shared: bool) -> Self {
        Self { shared, ..self.clone() }
    }
}

/// Appends nodes while tracking shapes.
struct GraphBuilder<'a> {
    hp: &'a HyperParams,
    nodes: Vec<LayerNode>,
    outputs: Vec<NodeId>,
    iteration: usize,
    scale: Option<usize>,
    block: Block,
}

impl<'a> GraphBuilder<'a> {
    fn new(hp: &'a HyperParams) -> Self {
        let mut b = Self {
            hp,
            nodes: Vec::new(),
            outputs: Vec::new(),
            iteration: 0,
            scale: None,
            block: Block::Data,
        };
        b.nodes.push(LayerNode {
            id: 0,
            kind: NodeKind::Input,
            inputs: vec![],
            weight_group: None,
            iteration: 0,
            scale: None,
            block: Block::Data,
            shape: FeatureShape::new(hp.input_h, hp.input_w, INPUT_CHANNELS),
        });
        b
    }

    fn shape(&self, id: NodeId) -> FeatureShape {
        self.nodes[id].shape
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, group: Option<String>) -> Result<NodeId, BuildError> {
        let id = self.nodes.len();
        let first = self.shape(inputs[0]);
        let shape_err = |what, lhs, rhs| BuildError::Shape {
            node: id,
            what,
            lhs,
            rhs,
        };
        let shape = match &kind {
            NodeKind::Input => unreachable!("single input node"),
            NodeKind::Conv {
                stride, in_c, out_c, ..
            } => {
                if first.c != *in_c {
                    return Err(shape_err("conv input channels", first.c, *in_c));
                }
                FeatureShape::new(first.h.div_ceil(*stride), first.w.div_ceil(*stride), *out_c)
            }
            NodeKind::BatchNorm { channels } => {
                if first.c != *channels {
                    return Err(shape_err("batch-norm channels", first.c, *channels));
                }
                first
            }
            NodeKind::Relu | NodeKind::Dropout { .. } | NodeKind::Output { .. } => first,
            NodeKind::Add => {
                let other = self.shape(inputs[1]);
                if other != first {
                    return Err(shape_err(
                        "add operand elements",
                        first.elements() as usize,
                        other.elements() as usize,
                    ));
                }
                first
            }
            NodeKind::Concat => {
                let mut c = 0;
                for &i in &inputs {
                    let s = self.shape(i);
                    if (s.h, s.w) != (first.h, first.w) {
                        return Err(shape_err("concat spatial extent", first.h * first.w, s.h * s.w));
                    }
                    c += s.c;
                }
                FeatureShape::new(first.h, first.w, c)
            }
            NodeKind::MaxPool { stride, .. } => {
                FeatureShape::new(first.h.div_ceil(*stride), first.w.div_ceil(*stride), first.c)
            }
            NodeKind::ResizeBilinear { out_h, out_w } => FeatureShape::new(*out_h, *out_w, first.c),
        };
        self.nodes.push(LayerNode {
            id,
            kind,
            inputs,
            weight_group: group.map(GroupId),
            iteration: self.iteration,
            scale: self.scale,
            block: self.block,
            shape,
        });
        Ok(id)
    }

    fn conv(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        out_c: usize,
        group: String,
    ) -> Result<NodeId, BuildError> {
        let in_c = self.shape(x).c;
        self.push(
            NodeKind::Conv {
                kernel,
                stride,
                in_c,
                out_c,
                depthwise: false,
                bias: false,
            },
            vec![x],
            Some(group),
        )
    }

    fn bn(&mut self, x: NodeId, group: String) -> Result<NodeId, BuildError> {
        let channels = self.shape(x).c;
        self.push(NodeKind::BatchNorm { channels }, vec![x], Some(group))
    }

    fn op(&mut self, kind: NodeKind, inputs: Vec<NodeId>) -> Result<NodeId, BuildError> {
        self.push(kind, inputs, None)
    }

    fn resize_to(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId, BuildError> {
        let s = self.shape(x);
        if (s.h, s.w) == (h, w) {
            return Ok(x);
        }
        self.op(NodeKind::ResizeBilinear { out_h: h, out_w: w }, vec![x])
    }

    /// Concatenation that degenerates to the single input when `parts` has one element.
    fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId, BuildError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.op(NodeKind::Concat, parts)
    }

    fn downsample_stage(&mut self, x: NodeId, stage: usize) -> Result<NodeId, BuildError> {
        let conv = self.conv(x, 3, DATA_STRIDE, self.hp.f_r(), format!("data/stage{stage}/conv"))?;
        let pool = self.op(
            NodeKind::MaxPool {
                size: DATA_STRIDE,
                stride: DATA_STRIDE,
            },
            vec![x],
        )?;
        let cat = self.op(NodeKind::Concat, vec![conv, pool])?;
        let bn = self.bn(cat, format!("data/stage{stage}/bn"))?;
        self.op(NodeKind::Relu, vec![bn])
    }

    fn data_block(&mut self) -> Result<Vec<NodeId>, BuildError> {
        self.iteration = 0;
        self.block = Block::Data;
        self.scale = None;
        let s1 = self.downsample_stage(0, 1)?;
        let mut x = self.downsample_stage(s1, 2)?;
        let mut scales = Vec::with_capacity(self.hp.l);
        for l in 1..=self.hp.l {
            self.scale = Some(l);
            let c = self.conv(x, 3, 2, self.hp.f, format!("data/scale{l}/conv"))?;
            let b = self.bn(c, format!("data/scale{l}/bn"))?;
            x = self.op(NodeKind::Relu, vec![b])?;
            scales.push(x);
        }
        Ok(scales)
    }

    fn iteration(&mut self, n: usize, feedback: &[NodeId]) -> Result<Vec<NodeId>, BuildError> {
        let hp = self.hp;
        self.iteration = n;
        self.block = Block::Iterative;
        let prefix = if hp.shared {
            "iter".to_string()
        } else {
            format!("iter{n}")
        };
        let mut normed = Vec::with_capacity(hp.l);
        for (l, &fb) in (1..).zip(feedback) {
            self.scale = Some(l);
            normed.push(self.bn(fb, format!("iter{n}/scale{l}/bn"))?);
        }
        let mut outs = Vec::with_capacity(hp.l);
        for l in 1..=hp.l {
            self.scale = Some(l);
            let target = self.shape(normed[l - 1]);
            let mut x = normed[l - 1];
            if n >= 2 {
                let mut parts = Vec::with_capacity(hp.l);
                for &src in &normed {
                    parts.push(self.resize_to(src, target.h, target.w)?);
                }
                let cat = self.concat(parts)?;
                let a = self.conv(cat, 3, 1, hp.f_r(), format!("{prefix}/scale{l}/mix/conv1"))?;
                let a = self.op(NodeKind::Relu, vec![a])?;
                let b = self.conv(a, 3, 1, hp.f, format!("{prefix}/scale{l}/mix/conv2"))?;
                let skip = self.conv(cat, 1, 1, hp.f, format!("{prefix}/scale{l}/mix/skip"))?;
                let sum = self.op(NodeKind::Add, vec![b, skip])?;
                x = self.op(NodeKind::Relu, vec![sum])?;
            }
            for k in 1..=hp.k {
                let e = self.conv(x, 1, 1, hp.expanded(), format!("{prefix}/scale{l}/brb{k}/expand"))?;
                let e = self.op(NodeKind::Relu, vec![e])?;
                let d = self.push(
                    NodeKind::Conv {
                        kernel: 3,
                        stride: 1,
                        in_c: hp.expanded(),
                        out_c: hp.expanded(),
                        depthwise: true,
                        bias: false,
                    },
                    vec![e],
                    Some(format!("{prefix}/scale{l}/brb{k}/depthwise")),
                )?;
                let d = self.op(NodeKind::Relu, vec![d])?;
                let d = self.op(NodeKind::Dropout { rate: hp.dropout }, vec![d])?;
                let p = self.conv(d, 1, 1, hp.f, format!("{prefix}/scale{l}/brb{k}/project"))?;
                x = self.op(NodeKind::Add, vec![x, p])?;
            }
            outs.push(x);
        }
        Ok(outs)
    }

    fn head(&mut self, n: usize, feedback: &[NodeId]) -> Result<NodeId, BuildError> {
        let hp = self.hp;
        self.iteration = n;
        self.block = Block::Head;
        self.scale = None;
        let fine = self.shape(feedback[0]);
        let mut parts = Vec::with_capacity(feedback.len());
        for &src in feedback {
            parts.push(self.resize_to(src, fine.h, fine.w)?);
        }
        let cat = self.concat(parts)?;
        let in_c = self.shape(cat).c;
        let logits = self.push(
            NodeKind::Conv {
                kernel: 1,
                stride: 1,
                in_c,
                out_c: hp.classes,
                depthwise: false,
                bias: true,
            },
            vec![cat],
            Some(format!("head{n}/conv")),
        )?;
        let up = self.resize_to(logits, fine.h * HEAD_UPSAMPLE, fine.w * HEAD_UPSAMPLE)?;
        let out = self.op(NodeKind::Output { index: n }, vec![up])?;
        self.outputs.push(out);
        Ok(out)
    }

    fn finish(self) -> Result<CompGraph, BuildError> {
        let meta = GraphMeta {
            input: FeatureShape::new(self.hp.input_h, self.hp.input_w, INPUT_CHANNELS),
            classes: self.hp.classes,
            hparams: Some(self.hp.clone()),
        };
        Ok(CompGraph::new(self.nodes, self.outputs, meta)?)
    }
}

/// Builds the unrolled graph: data block, `N` iterations, `N` heads.
pub fn build_itnet(hp: &HyperParams) -> Result<CompGraph, BuildError> {
    hp.validate()?;
    let mut b = GraphBuilder::new(hp);
    let mut feedback = b.data_block()?;
    for n in 1..=hp.n {
        feedback = b.iteration(n, &feedback)?;
        b.head(n, &feedback)?;
    }
    b.finish()
}

/// Node ids of the `L` scale maps the data block produces.
pub fn data_block_outputs(g: &CompGraph) -> Vec<NodeId> {
    let mut last: Vec<(usize, NodeId)> = Vec::new();
    for n in g
        .nodes()
        .iter()
        .filter(|n| n.block == Block::Data && n.kind == NodeKind::Relu)
    {
        if let Some(l) = n.scale {
            last.retain(|(s, _)| *s != l);
            last.push((l, n.id));
        }
    }
    last.sort();
    last.into_iter().map(|(_, id)| id).collect()
}
