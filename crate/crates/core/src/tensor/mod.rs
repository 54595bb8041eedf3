//! Dense channels-last tensors, reference kernels and a reverse-mode tape.
//!
//! Activations are rank-4 `batch × height × width × channels`; parameters
//! use lower ranks (`[c]` for batch-norm vectors, `[kh, kw, in, out]` for
//! convolution kernels). All kernels are naive loops with a fixed
//! accumulation order, so identical inputs give bit-identical outputs.

pub mod kernels;
pub mod tape;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use kernels::Padding;
pub use tape::{GradTape, Gradients, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: expected rank {expected}, got rank {actual}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: mismatch in {dim}: {lhs} vs {rhs}")]
    Mismatch {
        op: &'static str,
        dim: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("{op}: unsupported {what} = {value}")]
    Unsupported {
        op: &'static str,
        what: &'static str,
        value: String,
    },
    #[error("label {label} at pixel {index} is not a class id below {classes} nor the ignore id {ignore}")]
    BadLabel {
        label: u8,
        index: usize,
        classes: usize,
        ignore: u8,
    },
    #[error("batch norm: variance + eps = {0} is not positive")]
    NonPositiveVariance(f64),
    #[error("variable {0} was never recorded on this tape")]
    Unrecorded(usize),
    #[error("backward: loss must be a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("value of variable {0} was released")]
    Released(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ElementCount { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        debug_assert!(check_shape(shape).is_ok(), "invalid shape {shape:?}");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `[b, h, w, c]` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        if self.shape.len() != 4 {
            return Err(TensorError::Rank {
                op,
                expected: 4,
                actual: self.shape.len(),
            });
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|x| x * a)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(mismatch("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Element-wise conversion into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64_lossy())).collect(),
        }
    }

    /// Per-pixel argmax over the channel axis of a rank-4 tensor.
    pub fn argmax_channels(&self) -> Result<LabelMap> {
        let [b, h, w, c] = self.dims4("argmax_channels")?;
        if c > 256 {
            return Err(TensorError::Unsupported {
                op: "argmax_channels",
                what: "channel count",
                value: c.to_string(),
            });
        }
        let data = self
            .data
            .chunks_exact(c)
            .map(|px| {
                let mut best = 0;
                for (i, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        Ok(LabelMap { shape: [b, h, w], data })
    }

    /// Extracts sample `index` along the batch axis as a batch of one.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let [b, h, w, c] = self.dims4("batch_item")?;
        if index >= b {
            return Err(TensorError::Mismatch {
                op: "batch_item",
                dim: "batch index",
                lhs: index,
                rhs: b,
            });
        }
        let len = h * w * c;
        Ok(Self {
            shape: vec![1, h, w, c],
            data: self.data[index * len..(index + 1) * len].to_vec(),
        })
    }

    /// Stacks rank-4 tensors with equal `h, w, c` along the batch axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or(TensorError::Unsupported {
            op: "stack",
            what: "item count",
            value: "0".into(),
        })?;
        let [_, h, w, c] = first.dims4("stack")?;
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            let [b, th, tw, tc] = t.dims4("stack")?;
            if (th, tw, tc) != (h, w, c) {
                return Err(mismatch("stack", &first.shape, &t.shape));
            }
            batch += b;
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: vec![batch, h, w, c],
            data,
        })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(())
}

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    let dim = lhs
        .iter()
        .zip(rhs)
        .position(|(a, b)| a != b)
        .map(|i| ["dim0", "dim1", "dim2", "dim3", "dim4"][i.min(4)])
        .unwrap_or("rank");
    let (l, r) = match lhs.iter().zip(rhs).find(|(a, b)| a != b) {
        Some((a, b)) => (*a, *b),
        None => (lhs.len(), rhs.len()),
    };
    TensorError::Mismatch {
        op,
        dim,
        lhs: l,
        rhs: r,
    }
}

/// Per-pixel class ids, `batch × height × width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], label: u8) -> Self {
        Self {
            shape,
            data: vec![label; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn batch_item(&self, index: usize) -> LabelMap {
        let [_, h, w] = self.shape;
        LabelMap {
            shape: [1, h, w],
            data: self.data[index * h * w..(index + 1) * h * w].to_vec(),
        }
    }

    pub fn stack(items: &[&LabelMap]) -> Result<LabelMap> {
        let first = items.first().ok_or(TensorError::Unsupported {
            op: "stack",
            what: "item count",
            value: "0".into(),
        })?;
        let [_, h, w] = first.shape;
        let mut data = Vec::new();
        let mut batch = 0;
        for l in items {
            if l.shape[1..] != [h, w] {
                return Err(mismatch("stack", &first.shape, &l.shape));
            }
            batch += l.shape[0];
            data.extend_from_slice(&l.data);
        }
        Ok(LabelMap {
            shape: [batch, h, w],
            data,
        })
    }
}
