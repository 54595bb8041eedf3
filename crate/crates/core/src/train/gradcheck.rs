use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::ParamKey;
use super::{multi_output_loss, TrainError, WeightScheme, IGNORE_LABEL};
use crate::builder::ParamStore;
use crate::graph::{execute, CompGraph, ExecMode, GroupId};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Minimum number of sampled parameter elements.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that gradients near
    /// zero are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSample {
    pub group: GroupId,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Group of the worst sample.
    pub worst: Option<GroupId>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn groups_covered(&self) -> usize {
        self.samples
            .iter()
            .map(|s| &s.group)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    }
}

fn loss_and_grads<T: Scalar>(
    graph: &CompGraph,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    labels: &Arc<LabelMap>,
    scheme: &WeightScheme,
    want_grads: bool,
) -> Result<(f64, BTreeMap<ParamKey, Tensor<T>>), TrainError> {
    let mode = ExecMode::Train {
        dropout: false,
        seed: 0,
        step: 0,
    };
    let mut pass = execute(graph, input, params, mode)?;
    let loss = multi_output_loss(&mut pass.tape, &pass.outputs, labels, scheme, IGNORE_LABEL)?;
    let value = pass.tape.value(loss)?.data()[0].to_f64_lossy();
    let mut out = BTreeMap::new();
    if want_grads {
        let grads = pass.tape.backward(loss)?;
        for ((g, name), v) in &pass.params {
            let shape = pass.tape.shape(*v)?.to_vec();
            out.insert((g.clone(), name.to_string()), grads.get_or_zero(*v, &shape));
        }
    }
    Ok((value, out))
}

/// Compares the f32 backward pass with central finite differences of the
/// same loss evaluated in f64, over random elements of every weight group.
pub fn grad_check(
    graph: &CompGraph,
    params: &ParamStore<f32>,
    input: &Tensor<f32>,
    labels: &LabelMap,
    scheme: &WeightScheme,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, TrainError> {
    let labels = Arc::new(labels.clone());
    let (_, analytic) = loss_and_grads(graph, params, input, &labels, scheme, true)?;
    let p64: ParamStore<f64> = params.cast();
    let x64: Tensor<f64> = input.cast();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keys: Vec<_> = analytic.keys().cloned().collect();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (k, key) in keys.iter().enumerate() {
        picks.push((k, rng.gen_range(0..analytic[key].numel())));
    }
    while picks.len() < cfg.samples {
        let k = rng.gen_range(0..keys.len());
        picks.push((k, rng.gen_range(0..analytic[&keys[k]].numel())));
    }

    let mut samples = Vec::with_capacity(picks.len());
    for (k, index) in picks {
        let (group, name) = &keys[k];
        let eval = |delta: f64| -> Result<f64, TrainError> {
            let mut p = p64.clone();
            p.perturb(group, name, index, delta)?;
            Ok(loss_and_grads(graph, &p, &x64, &labels, scheme, false)?.0)
        };
        let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
        let a = f64::from(analytic[&keys[k]].data()[index]);
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        samples.push(GradSample {
            group: group.clone(),
            name: name.clone(),
            index,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    let worst = samples.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
    Ok(GradCheckReport {
        max_rel_err: worst.map_or(0.0, |s| s.rel_err),
        worst: worst.map(|s| s.group.clone()),
        tolerance: cfg.tolerance,
        samples,
    })
}

/// Largest relative difference (max-norm per tensor) between each shared
/// gradient and the sum of the gradients of its untied clones in
/// `independent`, which must have the same structure as `shared`.
pub fn shared_clone_check<T: Scalar>(
    shared: &CompGraph,
    independent: &CompGraph,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    labels: &LabelMap,
    scheme: &WeightScheme,
) -> Result<f64, TrainError> {
    let labels = Arc::new(labels.clone());
    let clones = params.remap(shared, independent)?;
    let (_, gs) = loss_and_grads(shared, params, input, &labels, scheme, true)?;
    let (_, gi) = loss_and_grads(independent, &clones, input, &labels, scheme, true)?;
    let mut pairs = BTreeMap::<GroupId, Vec<GroupId>>::new();
    for (s, i) in shared.nodes().iter().zip(independent.nodes()) {
        if let (Some(a), Some(b)) = (&s.weight_group, &i.weight_group) {
            let v = pairs.entry(a.clone()).or_default();
            if !v.contains(b) {
                v.push(b.clone());
            }
        }
    }
    let mut worst = 0.0f64;
    for ((group, name), g) in &gs {
        let mut sum = Tensor::<T>::zeros(g.shape());
        for clone in &pairs[group] {
            sum.add_assign(&gi[&(clone.clone(), name.clone())])?;
        }
        let scale = g.max_abs().to_f64_lossy().max(f64::MIN_POSITIVE);
        let diff = g
            .data()
            .iter()
            .zip(sum.data())
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .fold(0.0, f64::max);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{build_itnet, HyperParams};
    use crate::train::gen_synthetic_dataset;

    fn fixture(shared: bool) -> (CompGraph, ParamStore<f32>, Tensor<f32>, LabelMap) {
        let g = build_itnet(&HyperParams::new(1, 2, 1, 2, 2, 8, 8, shared)).unwrap();
        let p = ParamStore::init(&g, 2);
        let d = gen_synthetic_dataset(5, 2, 8, 8, 2).unwrap();
        let (x, l) = d.batch(&[0, 1], &[]);
        (g, p, x, l)
    }

    #[test]
    fn small_network_passes() {
        let (g, p, x, l) = fixture(true);
        let s = WeightScheme::new(vec![1.0, 1.0]).unwrap();
        let cfg = GradCheckConfig {
            samples: 30,
            ..GradCheckConfig::default()
        };
        let r = grad_check(&g, &p, &x, &l, &s, cfg).unwrap();
        assert_eq!(r.groups_covered(), g.groups().len());
        assert!(r.passed(), "{:?} {}", r.worst, r.max_rel_err);
    }

    #[test]
    fn unweighted_head_gets_zero_gradient() {
        let (g, p, x, l) = fixture(true);
        let s = WeightScheme::new(vec![1.0, 0.0]).unwrap();
        let (_, grads) = loss_and_grads(&g, &p, &x, &Arc::new(l), &s, true).unwrap();
        for ((group, _), t) in grads {
            if group.as_str().starts_with("head2") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn clones_sum_to_shared() {
        let (s, p, x, l) = fixture(true);
        let (i, ..) = fixture(false);
        let w = WeightScheme::new(vec![1.0, 1.0]).unwrap();
        let err = shared_clone_check(&s, &i, &p.cast::<f64>(), &x.cast(), &l, &w).unwrap();
        assert!(err < 1e-12, "{err}");
    }
}
