use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::LabelMap;

/// Chance-level mIoU used as the default curve origin.
pub const DEFAULT_Y0: f64 = 0.00828;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("curve x values must be strictly increasing and positive (x[{index}] = {value})")]
    NonMonotone { index: usize, value: f64 },
    #[error("curve has {x} x values and {y} y values")]
    Length { x: usize, y: usize },
    #[error("empty curve")]
    Empty,
    #[error("label maps differ in shape: {0:?} vs {1:?}")]
    Shape([usize; 3], [usize; 3]),
}

/// Pixel counts, rows = truth, columns = prediction. A trailing column
/// collects predictions outside `0..C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * (classes + 1)],
        }
    }

    /// Adds every pixel whose truth is not `ignore`. Predictions outside
    /// `0..C` count as wrong for the true class only.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u8) -> Result<(), MetricError> {
        if pred.shape() != truth.shape() {
            return Err(MetricError::Shape(pred.shape(), truth.shape()));
        }
        let c = self.classes;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == ignore || t as usize >= c {
                continue;
            }
            self.counts[t as usize * (c + 1) + (p as usize).min(c)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Mean IoU over classes present in truth or prediction; 0 when no
    /// class is present.
    pub fn miou(&self) -> f64 {
        let c = self.classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.counts[k * (c + 1) + k];
            let row: u64 = self.counts[k * (c + 1)..(k + 1) * (c + 1)].iter().sum();
            let col: u64 = (0..c).map(|i| self.counts[i * (c + 1) + k]).sum();
            let union = row + col - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            log::warn!("mIoU of an image without valid pixels is defined as 0");
            return 0.0;
        }
        sum / present as f64
    }
}

/// Mean intersection-over-union of one pair of label maps.
pub fn miou(pred: &LabelMap, truth: &LabelMap, classes: usize, ignore: u8) -> Result<f64, MetricError> {
    let mut c = Confusion::new(classes);
    c.add(pred, truth, ignore)?;
    Ok(c.miou())
}

/// One point of an accuracy-over-compute curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
}

/// Area between the piecewise-linear curve through `(0, y0), (x_1, y_1),
/// …, (x_N, y_N)` and the level `y0`, divided by `x_N`.
pub fn auc(x: &[f64], y: &[f64], y0: f64) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Length { x: x.len(), y: y.len() });
    }
    if x.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        if !(xi > prev.0) || !xi.is_finite() {
            return Err(MetricError::NonMonotone { index: i, value: xi });
        }
        let h = yi - y0;
        area += (xi - prev.0) * (prev.1 + h) / 2.0;
        prev = (xi, h);
    }
    Ok(area / prev.0)
}

pub fn auc_of(points: &[CurvePoint], y0: f64) -> Result<f64, MetricError> {
    let x: Vec<f64> = points.iter().map(|p| p.x).collect();
    let y: Vec<f64> = points.iter().map(|p| p.y).collect();
    auc(&x, &y, y0)
}
