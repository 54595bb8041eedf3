//! Multi-output training, metrics, gradient checking and a synthetic
//! dataset.

mod adam;
mod gradcheck;
mod metrics;
mod scheme;
mod synthetic;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{HyperParams, ParamError, ParamStore};
use crate::graph::exec::ExecError;
use crate::graph::{execute, CompGraph, ExecMode, GroupId};
use crate::ntf::{NtfError, NtfFile, NtfTensor};
use crate::tensor::kernels::BnConfig;
use crate::tensor::{LabelMap, Tensor, TensorError};

pub use adam::{adam_step, AdamConfig, AdamError, AdamState, ParamKey};
pub use gradcheck::{grad_check, shared_clone_check, GradCheckConfig, GradCheckReport, GradSample};
pub use metrics::{auc, auc_of, miou, Confusion, CurvePoint, MetricError, DEFAULT_Y0};
pub use scheme::{lr_at, multi_output_loss, SchemeError, SchemeFamily, WeightScheme};
pub use synthetic::{gen_synthetic_dataset, Dataset, DatasetError};

/// Label id excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub lr_decay: f64,
    /// Fractions of `epochs` after which the rate is multiplied by `lr_decay`.
    pub lr_boundaries: Vec<f64>,
    pub adam: AdamConfig,
    pub dropout: bool,
    /// L2 factor on convolution weights; 0 disables it.
    pub weight_decay: f64,
    pub flip: bool,
    pub seed: u64,
    pub scheme: SchemeFamily,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub ignore_label: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            max_steps: None,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_boundaries: vec![0.7, 0.85],
            adam: AdamConfig::default(),
            dropout: true,
            weight_decay: 1e-5,
            flip: true,
            seed: 0,
            scheme: SchemeFamily::All,
            eval_every: 1,
            ignore_label: IGNORE_LABEL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, value: String| Err(TrainError::Config { field, value });
        if self.epochs == 0 {
            return bad("epochs", "0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr.to_string());
        }
        if let Some(f) = self.lr_boundaries.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return bad("lr_boundaries", f.to_string());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay.to_string());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "0".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.epochs, self.lr, self.lr_decay, &self.lr_boundaries)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {field} = {value}")]
    Config { field: &'static str, value: String },
    #[error("loss became non-finite ({loss}) at step {step}; non-finite outputs: {outputs:?}")]
    NonFinite { step: u64, loss: f64, outputs: Vec<usize> },
    #[error("dataset has {have} samples, batch size is {batch}")]
    TooSmall { have: usize, batch: usize },
    #[error("dataset images are {data:?}, network expects {net:?}")]
    Extent { data: (usize, usize), net: (usize, usize) },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Ntf(#[from] NtfError),
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// mIoU of every output on the evaluation set.
    pub miou: Vec<f64>,
}

/// Mutable training state: parameters, optimizer moments and step count.
pub struct Trainer {
    graph: CompGraph,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    cfg: TrainConfig,
    scheme: WeightScheme,
    step: u64,
}

impl Trainer {
    pub fn new(graph: CompGraph, params: ParamStore<f32>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        params.check(&graph)?;
        let scheme = WeightScheme::from_family(&cfg.scheme, graph.outputs().len())?;
        Ok(Self {
            graph,
            params,
            adam: AdamState::default(),
            cfg,
            scheme,
            step: 0,
        })
    }

    pub fn graph(&self) -> &CompGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn steps_per_epoch(&self, data: &Dataset) -> Result<usize, TrainError> {
        let spe = data.len() / self.cfg.batch_size;
        if spe == 0 {
            return Err(TrainError::TooSmall {
                have: data.len(),
                batch: self.cfg.batch_size,
            });
        }
        Ok(spe)
    }

    pub fn total_steps(&self, data: &Dataset) -> Result<u64, TrainError> {
        let all = (self.cfg.epochs * self.steps_per_epoch(data)?) as u64;
        Ok(self.cfg.max_steps.map_or(all, |m| m.min(all)))
    }

    fn check_extent(&self, data: &Dataset) -> Result<(), TrainError> {
        let net = self.graph.meta().input;
        if data.extent() != (net.h, net.w) {
            return Err(TrainError::Extent {
                data: data.extent(),
                net: (net.h, net.w),
            });
        }
        Ok(())
    }

    fn batch_for(&self, data: &Dataset, step: u64, spe: usize) -> (Tensor<f32>, LabelMap) {
        let epoch = step / spe as u64;
        let pos = (step % spe as u64) as usize;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            self.cfg.seed ^ epoch.wrapping_mul(0xA24B_AED4_963E_E407),
        ));
        let b = self.cfg.batch_size;
        let idx = &order[pos * b..(pos + 1) * b];
        let mut flip_rng =
            ChaCha8Rng::seed_from_u64(self.cfg.seed.rotate_left(29) ^ step.wrapping_mul(0x9FB2_1C65_1E98_DF25));
        let flips: Vec<bool> = idx.iter().map(|_| self.cfg.flip && flip_rng.gen_bool(0.5)).collect();
        data.batch(idx, &flips)
    }

    /// One optimizer step on the next batch. Returns the batch loss.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64, TrainError> {
        self.check_extent(data)?;
        let spe = self.steps_per_epoch(data)?;
        let (x, labels) = self.batch_for(data, self.step, spe);
        let labels = Arc::new(labels);
        let mode = ExecMode::Train {
            dropout: self.cfg.dropout,
            seed: self.cfg.seed,
            step: self.step,
        };
        let mut pass = execute(&self.graph, &x, &self.params, mode)?;
        let loss = multi_output_loss(
            &mut pass.tape,
            &pass.outputs,
            &labels,
            &self.scheme,
            self.cfg.ignore_label,
        )?;
        let value = f64::from(pass.tape.value(loss)?.data()[0]);
        if !value.is_finite() {
            let outputs = (0..pass.outputs.len())
                .filter(|&i| pass.output(i).map(|t| !t.all_finite()).unwrap_or(true))
                .map(|i| i + 1)
                .collect();
            return Err(TrainError::NonFinite {
                step: self.step,
                loss: value,
                outputs,
            });
        }
        let mut grads = pass.tape.backward(loss)?;
        let mut named: BTreeMap<ParamKey, Tensor<f32>> = BTreeMap::new();
        for ((g, name), v) in &pass.params {
            if let Some(t) = grads.take(*v) {
                named.insert((g.clone(), name.to_string()), t);
            }
        }
        pass.update_running_stats(&mut self.params, BnConfig::default())?;
        let lr = self.cfg.lr_at(self.step as usize / spe);
        adam_step(
            &mut self.params,
            &named,
            &mut self.adam,
            self.cfg.adam,
            lr,
            self.cfg.weight_decay,
        )?;
        self.step += 1;
        Ok(value)
    }

    /// Runs until the configured step budget, evaluating on `eval` at the
    /// end of every `eval_every`-th epoch. `on_record` sees each history
    /// record as it is produced.
    pub fn run(
        &mut self,
        data: &Dataset,
        eval: &Dataset,
        mut on_record: impl FnMut(&HistoryRecord),
    ) -> Result<TrainSummary, TrainError> {
        let spe = self.steps_per_epoch(data)? as u64;
        let total = self.total_steps(data)?;
        let mut losses = Vec::new();
        let mut history = Vec::new();
        let mut epoch_loss = Vec::new();
        while self.step < total {
            let epoch = (self.step / spe) as usize;
            let lr = self.cfg.lr_at(epoch);
            let l = self.train_step(data)?;
            losses.push(l);
            epoch_loss.push(l);
            let epoch_done = self.step.is_multiple_of(spe);
            let last = self.step == total;
            if (epoch_done && (epoch + 1).is_multiple_of(self.cfg.eval_every)) || last {
                let rec = HistoryRecord {
                    epoch,
                    step: self.step,
                    lr,
                    loss: epoch_loss.iter().sum::<f64>() / epoch_loss.len() as f64,
                    miou: self.evaluate(eval)?,
                };
                on_record(&rec);
                history.push(rec);
            }
            if epoch_done {
                epoch_loss.clear();
            }
        }
        Ok(TrainSummary { losses, history })
    }

    /// mIoU of every output over `data`, inference mode.
    pub fn evaluate(&self, data: &Dataset) -> Result<Vec<f64>, TrainError> {
        evaluate(
            &self.graph,
            &self.params,
            data,
            self.cfg.batch_size,
            self.cfg.ignore_label,
        )
    }

    /// Named tensors holding parameters, optimizer state and step count.
    pub fn checkpoint(&self) -> NtfFile {
        let mut f = NtfFile::new();
        for (name, t) in self.params.to_named() {
            f.push(NtfTensor::f32(format!("param/{name}"), &t));
        }
        for (which, map) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((g, name), t) in map {
                f.push(NtfTensor::f32(format!("adam/{which}/{g}/{name}"), t));
            }
        }
        f.push(NtfTensor::u8("meta/step", vec![8], self.step.to_le_bytes().to_vec()));
        f.push(NtfTensor::u8(
            "meta/adam_step",
            vec![8],
            self.adam.step.to_le_bytes().to_vec(),
        ));
        f.push(NtfTensor::u8(
            "meta/seed",
            vec![8],
            self.params.seed().to_le_bytes().to_vec(),
        ));
        if let Some(hp) = self.graph.hparams() {
            let json = serde_json::to_vec(hp).expect("plain data serializes");
            f.push(NtfTensor::u8("meta/hparams", vec![json.len()], json));
        }
        f
    }

    /// Restores a trainer from [`checkpoint`](Self::checkpoint) output.
    pub fn resume(graph: CompGraph, ckpt: &NtfFile, cfg: TrainConfig) -> Result<Self, TrainError> {
        let seed = read_u64(ckpt, "meta/seed")?;
        let params = params_from_checkpoint(&graph, ckpt, seed)?;
        let mut t = Self::new(graph, params, cfg)?;
        t.step = read_u64(ckpt, "meta/step")?;
        t.adam.step = read_u64(ckpt, "meta/adam_step")?;
        for nt in &ckpt.tensors {
            let Some(rest) = nt.name.strip_prefix("adam/") else {
                continue;
            };
            let (which, key) = rest
                .split_once('/')
                .ok_or_else(|| TrainError::Checkpoint(nt.name.clone()))?;
            let (g, name) = key
                .rsplit_once('/')
                .ok_or_else(|| TrainError::Checkpoint(nt.name.clone()))?;
            let k = (GroupId::new(g), name.to_string());
            match which {
                "m" => t.adam.m.insert(k, nt.to_tensor()?),
                "v" => t.adam.v.insert(k, nt.to_tensor()?),
                _ => return Err(TrainError::Checkpoint(nt.name.clone())),
            };
        }
        Ok(t)
    }
}

fn read_u64(f: &NtfFile, name: &str) -> Result<u64, TrainError> {
    let b = f.get(name)?.bytes()?;
    let arr: [u8; 8] = b
        .try_into()
        .map_err(|_| TrainError::Checkpoint(format!("{name} is not 8 bytes")))?;
    Ok(u64::from_le_bytes(arr))
}

/// Hyperparameters stored in a checkpoint.
pub fn hparams_from_checkpoint(f: &NtfFile) -> Result<HyperParams, TrainError> {
    let bytes = f.get("meta/hparams")?.bytes()?;
    serde_json::from_slice(bytes).map_err(|e| TrainError::Checkpoint(format!("meta/hparams: {e}")))
}

/// Parameters stored in a checkpoint, validated against `graph`.
pub fn params_from_checkpoint(graph: &CompGraph, f: &NtfFile, seed: u64) -> Result<ParamStore<f32>, TrainError> {
    let mut named = BTreeMap::new();
    for t in &f.tensors {
        if let Some(n) = t.name.strip_prefix("param/") {
            named.insert(n.to_string(), t.to_tensor()?);
        }
    }
    Ok(ParamStore::from_named(graph, &named, seed)?)
}

/// Per-step losses and per-eval history of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub history: Vec<HistoryRecord>,
}

/// mIoU of every output over `data` at inference. Batches are evaluated in
/// parallel; confusion counts are integers, so the result is independent of
/// scheduling.
pub fn evaluate(
    graph: &CompGraph,
    params: &ParamStore<f32>,
    data: &Dataset,
    batch: usize,
    ignore: u8,
) -> Result<Vec<f64>, TrainError> {
    let n_out = graph.outputs().len();
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    let partial: Vec<Vec<Confusion>> = chunks
        .par_iter()
        .map(|idx| {
            let (x, labels) = data.batch::<f32>(idx, &[]);
            let pass = execute(graph, &x, params, ExecMode::Infer)?;
            let mut out = Vec::with_capacity(n_out);
            for i in 0..n_out {
                let mut c = Confusion::new(data.classes());
                c.add(&pass.output(i)?.argmax_channels()?, &labels, ignore)?;
                out.push(c);
            }
            Ok(out)
        })
        .collect::<Result<_, TrainError>>()?;
    let mut total = vec![Confusion::new(data.classes()); n_out];
    for p in &partial {
        for (t, c) in total.iter_mut().zip(p) {
            t.merge(c);
        }
    }
    Ok(total.iter().map(Confusion::miou).collect())
}

/// Trains `params` on `data` for `cfg`, evaluating on `eval`.
pub fn train(
    graph: &CompGraph,
    params: ParamStore<f32>,
    data: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TrainSummary, NtfFile), TrainError> {
    let mut t = Trainer::new(graph.clone(), params, cfg.clone())?;
    let summary = t.run(data, eval, |_| {})?;
    Ok((summary, t.checkpoint()))
}
