//! Reverse-mode gradient tape.
//!
//! Each recorded op appends one entry holding its output value and whatever
//! the backward kernel needs. `backward` walks the entries in exact reverse
//! order of recording. A leaf used by several ops accumulates the sum of
//! their gradients, which is how tied (shared) weights are trained.

use std::sync::Arc;

use super::kernels::{self, BnCache, ConvSpec, CrossEntropy, Mode};
use super::{LabelMap, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Dropout {
        input: Var,
        mask: Option<Vec<T>>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Resize(Var),
    CrossEntropy {
        logits: Var,
        labels: Arc<LabelMap>,
        ignore: u8,
        ce: CrossEntropy<T>,
    },
    WeightedSum(Vec<(Var, T)>),
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Relu(x) | Op::Resize(x) | Op::Sum(x) => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Dropout { input, .. } | Op::MaxPool { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Entry<T> {
    value: Option<Tensor<T>>,
    shape: Vec<usize>,
    op: Op<T>,
}

/// Ordered record of executed ops.
///
/// A non-recording tape computes the same forward values but keeps no
/// backward state and lets callers [`release`](GradTape::release) values
/// once their last consumer has run.
pub struct GradTape<T> {
    entries: Vec<Entry<T>>,
    recording: bool,
}

/// Gradient per recorded variable (`None` where no gradient reached it).
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when no gradient reached it.
    pub fn get_or_zero(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            recording: true,
        }
    }

    /// Tape for inference: forward values only.
    pub fn non_recording() -> Self {
        Self {
            entries: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, v: Var) -> Result<&Entry<T>> {
        self.entries.get(v.0).ok_or(TensorError::Unrecorded(v.0))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.entry(v)?.value.as_ref().ok_or(TensorError::Released(v.0))
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.entry(v)?.shape)
    }

    /// Drops the stored value of `v`. Only honoured on non-recording tapes.
    pub fn release(&mut self, v: Var) {
        if !self.recording {
            if let Some(e) = self.entries.get_mut(v.0) {
                e.value = None;
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.entries.push(Entry {
            shape: value.shape().to_vec(),
            value: Some(value),
            op,
        });
        Var(self.entries.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = kernels::conv2d(
            self.value(input)?,
            self.value(weight)?,
            bias.map(|b| self.value(b)).transpose()?,
            spec,
        )?;
        Ok(self.push(
            y,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    /// Batch norm with batch statistics (`stats = None`) or fixed statistics.
    /// Returns the output and the statistics that were used.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (y, cache) =
            kernels::batch_norm_forward(self.value(input)?, self.value(gamma)?, self.value(beta)?, stats, eps)?;
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        let v = self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        );
        Ok((v, mean, var))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = kernels::relu(self.value(x)?);
        Ok(self.push(y, Op::Relu(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a)?, self.value(b)?)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts.iter().map(|&p| self.value(p)).collect::<Result<Vec<_>>>()?;
        let y = kernels::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    pub fn dropout(&mut self, x: Var, rate: f64, key: u64, mode: Mode) -> Result<Var> {
        let (y, mask) = kernels::dropout(self.value(x)?, rate, key, mode)?;
        Ok(self.push(y, Op::Dropout { input: x, mask }))
    }

    pub fn max_pool(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = kernels::max_pool(self.value(x)?, size, stride)?;
        Ok(self.push(y, Op::MaxPool { input: x, argmax }))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = kernels::resize_bilinear_to(self.value(x)?, out_h, out_w)?;
        Ok(self.push(y, Op::Resize(x)))
    }

    /// Masked mean cross entropy as a one-element variable. The second
    /// value is the number of pixels that were not ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<LabelMap>, ignore: u8) -> Result<(Var, usize)> {
        let ce = kernels::softmax_cross_entropy_masked(self.value(logits)?, &labels, ignore)?;
        let (loss, valid) = (ce.loss, ce.valid);
        let v = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                ce,
            },
        );
        Ok((v, valid))
    }

    /// `Σ weight·term` over one-element variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v)?;
            if t.numel() != 1 {
                return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
            }
            total += w * t.data()[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    /// Gradients of the one-element `loss` w.r.t. every recorded variable.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.entry(loss)?;
        if !self.recording {
            return Err(TensorError::Unsupported {
                op: "backward",
                what: "tape mode",
                value: "non-recording".into(),
            });
        }
        if root.shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&root.shape, T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            for (v, contribution) in self.local_grads(entry, &g)? {
                accumulate(&mut grads[v.0], contribution)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, entry: &Entry<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        for v in entry.op.inputs() {
            self.entry(v)?;
        }
        Ok(match &entry.op {
            Op::Leaf => vec![],
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let gr = kernels::conv2d_backward(self.value(*input)?, self.value(*weight)?, g, *spec)?;
                let mut out = vec![(*input, gr.input), (*weight, gr.weight)];
                if let Some(b) = bias {
                    out.push((*b, gr.bias));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let gr = kernels::batch_norm_backward(self.value(*gamma)?, cache, g)?;
                vec![(*input, gr.input), (*gamma, gr.gamma), (*beta, gr.beta)]
            }
            Op::Relu(x) => vec![(*x, kernels::relu_backward(self.value(*x)?, g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Concat(parts) => {
                let widths = parts
                    .iter()
                    .map(|&p| Ok(*self.shape(p)?.last().unwrap_or(&0)))
                    .collect::<Result<Vec<_>>>()?;
                parts
                    .iter()
                    .copied()
                    .zip(kernels::concat_backward(g, &widths)?)
                    .collect()
            }
            Op::Dropout { input, mask } => {
                let gx = match mask {
                    Some(m) => {
                        let data = g.data().iter().zip(m).map(|(&a, &b)| a * b).collect();
                        Tensor::new(g.shape().to_vec(), data)?
                    }
                    None => g.clone(),
                };
                vec![(*input, gx)]
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, kernels::max_pool_backward(self.shape(*input)?, argmax, g)?)]
            }
            Op::Resize(x) => vec![(*x, kernels::resize_bilinear_backward(self.shape(*x)?, g)?)],
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                ce,
            } => vec![(
                *logits,
                kernels::cross_entropy_backward(ce, labels, *ignore, g.data()[0]),
            )],
            Op::WeightedSum(terms) => terms
                .iter()
                .map(|&(v, w)| (v, Tensor::scalar(w * g.data()[0])))
                .collect(),
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x)?, g.data()[0]))],
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&contribution),
        None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}
