use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ntf::{NtfError, NtfFile, NtfTensor};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least two classes, got {0}")]
    Classes(usize),
    #[error("dataset is empty")]
    Empty,
    #[error("images {images:?} and labels {labels:?} disagree")]
    Shape { images: Vec<usize>, labels: [usize; 3] },
    #[error(transparent)]
    Ntf(#[from] NtfError),
}

/// Images `[n, h, w, 3]` in `[0, 1]` with per-pixel labels `[n, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: LabelMap,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: LabelMap, classes: usize) -> Result<Self, DatasetError> {
        let ok = images.rank() == 4 && images.shape()[3] == 3 && images.shape()[..3] == labels.shape();
        if !ok {
            return Err(DatasetError::Shape {
                images: images.shape().to_vec(),
                labels: labels.shape(),
            });
        }
        if classes < 2 {
            return Err(DatasetError::Classes(classes));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(h, w)` of every image.
    pub fn extent(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    /// Stacks the samples at `indices`; `flips[i]` mirrors sample `i`
    /// horizontally.
    pub fn batch<T: Scalar>(&self, indices: &[usize], flips: &[bool]) -> (Tensor<T>, LabelMap) {
        let (h, w) = self.extent();
        let mut img = Vec::with_capacity(indices.len() * h * w * 3);
        let mut lab = Vec::with_capacity(indices.len() * h * w);
        for (k, &i) in indices.iter().enumerate() {
            let flip = flips.get(k).copied().unwrap_or(false);
            let pix = &self.images.data()[i * h * w * 3..(i + 1) * h * w * 3];
            let lbl = &self.labels.data()[i * h * w..(i + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    let p = y * w + sx;
                    img.extend(pix[p * 3..p * 3 + 3].iter().map(|&v| T::of(f64::from(v))));
                    lab.push(lbl[p]);
                }
            }
        }
        let b = indices.len();
        (
            Tensor::new(vec![b, h, w, 3], img).expect("sizes computed above"),
            LabelMap::new([b, h, w], lab).expect("sizes computed above"),
        )
    }

    /// Per-class pixel counts.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.classes];
        for &l in self.labels.data() {
            if (l as usize) < self.classes {
                hist[l as usize] += 1;
            }
        }
        hist
    }

    pub fn to_ntf(&self) -> NtfFile {
        let mut f = NtfFile::new();
        f.push(NtfTensor::f32("images", &self.images));
        f.push(NtfTensor::labels("labels", &self.labels));
        f.push(NtfTensor::u8("classes", vec![1], vec![self.classes as u8]));
        f
    }

    pub fn from_ntf(f: &NtfFile) -> Result<Self, DatasetError> {
        let images = f.get("images")?.to_tensor()?;
        let labels = f.get("labels")?.to_labels()?;
        let classes = f.get("classes")?.bytes()?.first().copied().ok_or(DatasetError::Empty)?;
        Self::new(images, labels, classes as usize)
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.20, 0.15],
    [0.15, 0.70, 0.25],
    [0.20, 0.30, 0.90],
    [0.90, 0.80, 0.10],
    [0.70, 0.20, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.55, 0.20],
    [0.55, 0.55, 0.55],
];

fn class_colour(class: usize) -> [f32; 3] {
    let base = PALETTE[(class - 1) % PALETTE.len()];
    let shade = 1.0 - 0.3 * ((class - 1) / PALETTE.len()) as f32;
    base.map(|c| c * shade)
}

/// Deterministic images of coloured rectangles and discs on a textured
/// background. Class 0 is background; class `k ≥ 1` is the shape drawn in
/// colour `k`. Shape sizes are chosen so that class areas are comparable.
pub fn gen_synthetic_dataset(
    seed: u64,
    count: usize,
    h: usize,
    w: usize,
    classes: usize,
) -> Result<Dataset, DatasetError> {
    if classes < 2 {
        return Err(DatasetError::Classes(classes));
    }
    if count == 0 || h == 0 || w == 0 {
        return Err(DatasetError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * h * w * 3);
    let mut labels = Vec::with_capacity(count * h * w);
    let area = (h * w) as f64;
    for _ in 0..count {
        let mut lab = vec![0u8; h * w];
        let mut order: Vec<usize> = (1..classes).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        // about (1 - a)^(C-1) of the image stays background; the exponent is
        // raised to make up for area clipped at the border
        let target = area * (1.0 - (classes as f64).powf(-1.6 / (classes - 1) as f64));
        for &class in &order {
            let a = target * rng.gen_range(0.6..1.4);
            // centres are uniform over the image and shapes are clipped at the border
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            if rng.gen_bool(0.5) {
                let aspect: f64 = rng.gen_range(0.5..2.0);
                let (hh, hw) = ((a * aspect).sqrt() / 2.0, (a / aspect).sqrt() / 2.0);
                for y in 0..h {
                    for x in 0..w {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        if dy.abs() <= hh && dx.abs() <= hw {
                            lab[y * w + x] = class as u8;
                        }
                    }
                }
            } else {
                let r2 = a / std::f64::consts::PI;
                for y in 0..h {
                    for x in 0..w {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        if dy * dy + dx * dx <= r2 {
                            lab[y * w + x] = class as u8;
                        }
                    }
                }
            }
        }
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let jitter: Vec<[f32; 3]> = (0..classes)
            .map(|_| [0; 3].map(|_: u8| rng.gen_range(-0.08f32..0.08)))
            .collect();
        for y in 0..h {
            for x in 0..w {
                let l = lab[y * w + x] as usize;
                let noise: f32 = rng.gen_range(-0.05..0.05);
                let px = if l == 0 {
                    let t = 0.35 + 0.1 * ((x as f32 * 0.7 + phase).sin() * (y as f32 * 0.5).cos());
                    [t + noise; 3]
                } else {
                    let c = class_colour(l);
                    [0, 1, 2].map(|i| c[i] + jitter[l][i] + noise)
                };
                images.extend(px.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        labels.extend_from_slice(&lab);
    }
    Dataset::new(
        Tensor::new(vec![count, h, w, 3], images).expect("sizes computed above"),
        LabelMap::new([count, h, w], labels).expect("sizes computed above"),
        classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = gen_synthetic_dataset(3, 4, 16, 24, 5).unwrap();
        assert_eq!(a, gen_synthetic_dataset(3, 4, 16, 24, 5).unwrap());
        assert_ne!(a, gen_synthetic_dataset(4, 4, 16, 24, 5).unwrap());
        assert!(a.labels().data().iter().all(|&l| l < 5));
        assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn classes_are_balanced_within_factor_two() {
        for classes in [2, 4, 11] {
            let d = gen_synthetic_dataset(1, 100, 32, 32, classes).unwrap();
            let hist = d.class_histogram();
            let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
            assert!(*hi as f64 <= 2.0 * *lo as f64, "C={classes}: {hist:?}");
        }
    }

    #[test]
    fn flip_mirrors_rows() {
        let d = gen_synthetic_dataset(0, 1, 8, 8, 3).unwrap();
        let (_, plain) = d.batch::<f32>(&[0], &[false]);
        let (_, flipped) = d.batch::<f32>(&[0], &[true]);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(plain.data()[y * 8 + x], flipped.data()[y * 8 + 7 - x]);
            }
        }
    }

    #[test]
    fn ntf_round_trip() {
        let d = gen_synthetic_dataset(2, 2, 8, 8, 3).unwrap();
        assert_eq!(Dataset::from_ntf(&d.to_ntf()).unwrap(), d);
    }
}
