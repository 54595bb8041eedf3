use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{CompGraph, GroupId, GroupSpec};
use crate::scalar::Scalar;
use crate::tensor::kernels::BnRunningStats;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("no parameters for group {0}")]
    MissingGroup(GroupId),
    #[error("group {group}: tensor {name} has shape {actual:?}, expected {expected:?}")]
    Shape {
        group: GroupId,
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("group {group}: missing tensor {name}")]
    MissingTensor { group: GroupId, name: String },
    #[error("graphs are not structurally identical at node {0}")]
    StructureMismatch(usize),
}

/// Parameters of one weight group.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupParams<T> {
    Conv {
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running: BnRunningStats<T>,
    },
}

impl<T: Scalar> GroupParams<T> {
    /// Trainable tensors by name, in a fixed order.
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            GroupParams::Conv { weight, bias } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            GroupParams::BatchNorm { gamma, beta, .. } => vec![("gamma", gamma), ("beta", beta)],
        }
    }

    pub fn trainable_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match (self, name) {
            (GroupParams::Conv { weight, .. }, "weight") => Some(weight),
            (GroupParams::Conv { bias, .. }, "bias") => bias.as_mut(),
            (GroupParams::BatchNorm { gamma, .. }, "gamma") => Some(gamma),
            (GroupParams::BatchNorm { beta, .. }, "beta") => Some(beta),
            _ => None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        match (self, name) {
            (GroupParams::Conv { weight, .. }, "weight") => Some(weight),
            (GroupParams::Conv { bias, .. }, "bias") => bias.as_ref(),
            (GroupParams::BatchNorm { gamma, .. }, "gamma") => Some(gamma),
            (GroupParams::BatchNorm { beta, .. }, "beta") => Some(beta),
            (GroupParams::BatchNorm { running, .. }, "running_mean") => Some(&running.mean),
            (GroupParams::BatchNorm { running, .. }, "running_var") => Some(&running.var),
            _ => None,
        }
    }

    fn all(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = self.trainable();
        if let GroupParams::BatchNorm { running, .. } = self {
            v.push(("running_mean", &running.mean));
            v.push(("running_var", &running.var));
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> GroupParams<U> {
        match self {
            GroupParams::Conv { weight, bias } => GroupParams::Conv {
                weight: weight.cast(),
                bias: bias.as_ref().map(Tensor::cast),
            },
            GroupParams::BatchNorm { gamma, beta, running } => GroupParams::BatchNorm {
                gamma: gamma.cast(),
                beta: beta.cast(),
                running: BnRunningStats {
                    mean: running.mean.cast(),
                    var: running.var.cast(),
                },
            },
        }
    }
}

/// Parameters for every weight group of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    groups: BTreeMap<GroupId, GroupParams<T>>,
    seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    /// Seed-deterministic initialization: He-uniform conv weights
    /// (bound `sqrt(6 / fan_in)`), zero biases, BN `gamma = 1, beta = 0`.
    /// Groups are visited in id order from one ChaCha stream.
    pub fn init(graph: &CompGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = BTreeMap::new();
        for (id, spec) in graph.groups() {
            let params = match *spec {
                GroupSpec::Conv {
                    kernel,
                    in_c,
                    depthwise,
                    bias,
                    out_c,
                } => {
                    let fan_in = kernel * kernel * if depthwise { 1 } else { in_c };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let shape = &spec.param_shapes()[0].1;
                    let weight = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
                    GroupParams::Conv {
                        weight,
                        bias: bias.then(|| Tensor::zeros(&[out_c])),
                    }
                }
                GroupSpec::BatchNorm { channels } => GroupParams::BatchNorm {
                    gamma: Tensor::full(&[channels], T::one()),
                    beta: Tensor::zeros(&[channels]),
                    running: BnRunningStats::new(channels),
                },
            };
            groups.insert(id.clone(), params);
        }
        Self { groups, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn group(&self, id: &GroupId) -> Result<&GroupParams<T>, ParamError> {
        self.groups.get(id).ok_or_else(|| ParamError::MissingGroup(id.clone()))
    }

    pub fn group_mut(&mut self, id: &GroupId) -> Result<&mut GroupParams<T>, ParamError> {
        self.groups
            .get_mut(id)
            .ok_or_else(|| ParamError::MissingGroup(id.clone()))
    }

    pub fn groups(&self) -> impl Iterator<Item = (&GroupId, &GroupParams<T>)> {
        self.groups.iter()
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = (&GroupId, &mut GroupParams<T>)> {
        self.groups.iter_mut()
    }

    /// Checks that every group of `graph` is present with the right shapes.
    pub fn check(&self, graph: &CompGraph) -> Result<(), ParamError> {
        for (id, spec) in graph.groups() {
            let params = self.group(id)?;
            let shapes = spec.param_shapes();
            let have = params.trainable();
            for (name, shape) in &shapes {
                let Some((_, t)) = have.iter().find(|(n, _)| n == name) else {
                    return Err(ParamError::MissingTensor {
                        group: id.clone(),
                        name: name.to_string(),
                    });
                };
                if t.shape() != shape.as_slice() {
                    return Err(ParamError::Shape {
                        group: id.clone(),
                        name: name.to_string(),
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Total trainable elements over all stored groups.
    pub fn trainable_elements(&self) -> usize {
        self.groups
            .values()
            .flat_map(|g| g.trainable().into_iter().map(|(_, t)| t.numel()))
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            groups: self.groups.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            seed: self.seed,
        }
    }

    /// Named tensors `"{group}/{tensor}"`, running statistics included.
    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        self.groups
            .iter()
            .flat_map(|(g, p)| p.all().into_iter().map(move |(n, t)| (format!("{g}/{n}"), t.clone())))
            .collect()
    }

    /// Inverse of [`to_named`](Self::to_named), validated against `graph`.
    pub fn from_named(graph: &CompGraph, named: &BTreeMap<String, Tensor<T>>, seed: u64) -> Result<Self, ParamError> {
        let mut groups = BTreeMap::new();
        for (id, spec) in graph.groups() {
            let take = |name: &str| -> Result<Tensor<T>, ParamError> {
                named
                    .get(&format!("{id}/{name}"))
                    .cloned()
                    .ok_or_else(|| ParamError::MissingTensor {
                        group: id.clone(),
                        name: name.to_string(),
                    })
            };
            let params = match spec {
                GroupSpec::Conv { bias, .. } => GroupParams::Conv {
                    weight: take("weight")?,
                    bias: if *bias { Some(take("bias")?) } else { None },
                },
                GroupSpec::BatchNorm { .. } => GroupParams::BatchNorm {
                    gamma: take("gamma")?,
                    beta: take("beta")?,
                    running: BnRunningStats {
                        mean: take("running_mean")?,
                        var: take("running_var")?,
                    },
                },
            };
            groups.insert(id.clone(), params);
        }
        let store = Self { groups, seed };
        store.check(graph)?;
        Ok(store)
    }

    /// Parameters for `target`, copied node-by-node from `self` laid out for
    /// `source`. The two graphs must be structurally identical (same node
    /// kinds in the same order), e.g. the shared and independent variants of
    /// one architecture. Each target group receives the source group of the
    /// first node that uses it.
    pub fn remap(&self, source: &CompGraph, target: &CompGraph) -> Result<Self, ParamError> {
        if source.nodes().len() != target.nodes().len() {
            return Err(ParamError::StructureMismatch(
                source.nodes().len().min(target.nodes().len()),
            ));
        }
        let mut groups = BTreeMap::new();
        for (s, t) in source.nodes().iter().zip(target.nodes()) {
            if s.kind != t.kind {
                return Err(ParamError::StructureMismatch(s.id));
            }
            if let (Some(sg), Some(tg)) = (&s.weight_group, &t.weight_group) {
                if !groups.contains_key(tg) {
                    groups.insert(tg.clone(), self.group(sg)?.clone());
                }
            }
        }
        let store = Self {
            groups,
            seed: self.seed,
        };
        store.check(target)?;
        Ok(store)
    }

    /// Adds `delta` to one element of a trainable tensor.
    pub fn perturb(&mut self, group: &GroupId, name: &str, index: usize, delta: T) -> Result<(), ParamError> {
        let t = self
            .group_mut(group)?
            .trainable_mut(name)
            .ok_or_else(|| ParamError::MissingTensor {
                group: group.clone(),
                name: name.to_string(),
            })?;
        t.data_mut()[index] += delta;
        Ok(())
    }
}
