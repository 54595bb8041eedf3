use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{GroupParams, ParamStore};
use crate::graph::GroupId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdamError {
    #[error("{group}/{name}: gradient shape {grad:?} vs parameter shape {param:?}")]
    Shape {
        group: GroupId,
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("gradient for unknown parameter {group}/{name}")]
    Unknown { group: GroupId, name: String },
}

pub type ParamKey = (GroupId, String);

/// First and second moment per parameter tensor, plus the update count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<ParamKey, Tensor<T>>,
    pub v: BTreeMap<ParamKey, Tensor<T>>,
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched (their moments do not decay). `weight_decay · w` is added to
/// the gradient of convolution weights only.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<ParamKey, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: AdamConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<(), AdamError> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps, wd) = (T::of(lr), T::of(cfg.eps), T::of(weight_decay));
    for ((group, name), g) in grads {
        let unknown = || AdamError::Unknown {
            group: group.clone(),
            name: name.clone(),
        };
        let gp = params.group_mut(group).map_err(|_| unknown())?;
        let decays = matches!(gp, GroupParams::Conv { .. }) && name == "weight" && weight_decay != 0.0;
        let w = gp.trainable_mut(name).ok_or_else(unknown)?;
        if w.shape() != g.shape() {
            return Err(AdamError::Shape {
                group: group.clone(),
                name: name.clone(),
                grad: g.shape().to_vec(),
                param: w.shape().to_vec(),
            });
        }
        let key = (group.clone(), name.clone());
        let m = state.m.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(key).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((wi, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = if decays { gi + wd * *wi } else { gi };
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *wi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
