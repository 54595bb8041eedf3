use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{GradTape, LabelMap, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("weight scheme has no positive weight")]
    AllZero,
    #[error("weight {0} is negative or not finite")]
    BadWeight(f64),
    #[error("scheme has {scheme} weights but the network has {outputs} outputs")]
    Length { scheme: usize, outputs: usize },
    #[error("invalid {family} parameter {value} for N = {n}")]
    Param {
        family: &'static str,
        value: usize,
        n: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How loss weights are chosen per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SchemeFamily {
    /// `a_n = 1` for every output.
    All,
    /// Only output `index` (1-based).
    Single { index: usize },
    /// Only the last `count` outputs.
    Late { count: usize },
    /// Outputs `1, 1+stride, 1+2·stride, …` plus the last one.
    Thinned { stride: usize },
    /// `a_n = n`.
    Increasing,
    /// Explicit weights.
    Custom { weights: Vec<f64> },
}

/// Non-negative loss weights `a_1..a_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    weights: Vec<f64>,
}

impl WeightScheme {
    pub fn new(weights: Vec<f64>) -> Result<Self, SchemeError> {
        if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(SchemeError::BadWeight(w));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(SchemeError::AllZero);
        }
        Ok(Self { weights })
    }

    pub fn from_family(family: &SchemeFamily, n: usize) -> Result<Self, SchemeError> {
        let bad = |family, value| SchemeError::Param { family, value, n };
        let w: Vec<f64> = match *family {
            SchemeFamily::All => vec![1.0; n],
            SchemeFamily::Single { index } => {
                if index == 0 || index > n {
                    return Err(bad("single", index));
                }
                (1..=n).map(|i| f64::from(u8::from(i == index))).collect()
            }
            SchemeFamily::Late { count } => {
                if count == 0 || count > n {
                    return Err(bad("late", count));
                }
                (1..=n).map(|i| f64::from(u8::from(i > n - count))).collect()
            }
            SchemeFamily::Thinned { stride } => {
                if stride == 0 {
                    return Err(bad("thinned", stride));
                }
                (1..=n)
                    .map(|i| f64::from(u8::from((i - 1) % stride == 0 || i == n)))
                    .collect()
            }
            SchemeFamily::Increasing => (1..=n).map(|i| i as f64).collect(),
            SchemeFamily::Custom { ref weights } => {
                if weights.len() != n {
                    return Err(SchemeError::Length {
                        scheme: weights.len(),
                        outputs: n,
                    });
                }
                weights.clone()
            }
        };
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `ā_n = a_n / Σ a_i`.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }
}

/// Records `Σ ā_n · CE(m_n)` on the tape. Outputs with zero weight are not
/// connected to the loss.
pub fn multi_output_loss<T: Scalar>(
    tape: &mut GradTape<T>,
    outputs: &[Var],
    labels: &Arc<LabelMap>,
    scheme: &WeightScheme,
    ignore: u8,
) -> Result<Var, SchemeError> {
    if scheme.len() != outputs.len() {
        return Err(SchemeError::Length {
            scheme: scheme.len(),
            outputs: outputs.len(),
        });
    }
    let mut terms = Vec::new();
    for (&m, w) in outputs.iter().zip(scheme.normalized()) {
        if w > 0.0 {
            let (ce, _) = tape.cross_entropy(m, Arc::clone(labels), ignore)?;
            terms.push((ce, T::of(w)));
        }
    }
    Ok(tape.weighted_sum(&terms)?)
}

/// Learning rate for `epoch` of `total`: `base` decayed by `factor` once
/// per boundary `floor(fraction · total)` already reached.
pub fn lr_at(epoch: usize, total: usize, base: f64, factor: f64, fractions: &[f64]) -> f64 {
    let passed = fractions
        .iter()
        .filter(|&&f| epoch >= (f * total as f64).floor() as usize)
        .count();
    base * factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn families() {
        let f = |fam, n| WeightScheme::from_family(&fam, n).unwrap().weights().to_vec();
        let mut e16 = vec![0.0; 16];
        e16[15] = 1.0;
        assert_eq!(f(SchemeFamily::Single { index: 16 }, 16), e16);
        let thin: Vec<usize> = f(SchemeFamily::Thinned { stride: 3 }, 16)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(thin, [1, 4, 7, 10, 13, 16]);
        let thin5: Vec<usize> = f(SchemeFamily::Thinned { stride: 5 }, 16)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(thin5, [1, 6, 11, 16]);
        assert_eq!(f(SchemeFamily::Increasing, 4), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f(SchemeFamily::Late { count: 2 }, 4), [0.0, 0.0, 1.0, 1.0]);
        assert!(WeightScheme::from_family(&SchemeFamily::Single { index: 17 }, 16).is_err());
        assert_eq!(WeightScheme::new(vec![0.0; 3]), Err(SchemeError::AllZero));
    }

    #[test]
    fn normalization() {
        let s = WeightScheme::new(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(s.normalized(), [0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn loss_is_weighted_mean_of_cross_entropies() {
        let mut tape = GradTape::<f64>::new();
        // two classes, uniform logits: CE = ln 2
        let m1 = tape.leaf(Tensor::zeros(&[1, 1, 1, 2]));
        // four classes, uniform logits: CE = ln 4
        let m2 = tape.leaf(Tensor::zeros(&[1, 1, 1, 4]));
        let labels = Arc::new(LabelMap::filled([1, 1, 1], 0));
        let mut terms = Vec::new();
        for m in [m1, m2] {
            terms.push((tape.cross_entropy(m, Arc::clone(&labels), 255).unwrap().0, 0.5));
        }
        let l = tape.weighted_sum(&terms).unwrap();
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((tape.value(l).unwrap().data()[0] - want).abs() < 1e-12);

        let s = WeightScheme::new(vec![3.0, 3.0]).unwrap();
        let m3 = tape.leaf(Tensor::zeros(&[1, 1, 1, 2]));
        let l2 = multi_output_loss(&mut tape, &[m1, m3], &labels, &s, 255).unwrap();
        assert!((tape.value(l2).unwrap().data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule() {
        let lr = |e| lr_at(e, 2000, 1e-3, 0.1, &[0.7, 0.85]);
        assert_eq!(lr(0), 1e-3);
        assert_eq!(lr(1399), 1e-3);
        assert!((lr(1400) - 1e-4).abs() < 1e-18);
        assert!((lr(1999) - 1e-5).abs() < 1e-18);
    }
}
