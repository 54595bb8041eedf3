//! Reference forward and backward kernels.
//!
//! Every kernel is a plain loop nest over `batch × height × width × channels`
//! with a fixed summation order. Backward kernels take the forward inputs
//! (or a cache produced by the forward kernel) plus the upstream gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mismatch, LabelMap, Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading padding of one spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisGeometry {
    pub input: usize,
    pub output: usize,
    pub pad_before: usize,
}

impl AxisGeometry {
    /// Same padding puts the odd pad element after the data.
    pub fn new(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<Self> {
        match padding {
            Padding::Same => {
                let output = input.div_ceil(stride);
                let total = ((output - 1) * stride + kernel).saturating_sub(input);
                Some(Self {
                    input,
                    output,
                    pad_before: total / 2,
                })
            }
            Padding::Valid => {
                if input < kernel {
                    return None;
                }
                Some(Self {
                    input,
                    output: (input - kernel) / stride + 1,
                    pad_before: 0,
                })
            }
        }
    }

    /// Input coordinate touched by output `o` and kernel tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, stride: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - self.pad_before as isize;
        (pos >= 0 && (pos as usize) < self.input).then_some(pos as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
    pub depthwise: bool,
}

struct ConvShape {
    batch: usize,
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    rows: AxisGeometry,
    cols: AxisGeometry,
}

fn conv_shape<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, spec: ConvSpec) -> Result<ConvShape> {
    let [batch, h, w, in_c] = input.dims4("conv2d")?;
    if weight.rank() != 4 {
        return Err(TensorError::Rank {
            op: "conv2d weights",
            expected: 4,
            actual: weight.rank(),
        });
    }
    if !(spec.stride == 1 || spec.stride == 2) {
        return Err(TensorError::Unsupported {
            op: "conv2d",
            what: "stride",
            value: spec.stride.to_string(),
        });
    }
    let ws = weight.shape();
    let (kh, kw) = (ws[0], ws[1]);
    if ws[2] != in_c {
        return Err(TensorError::Mismatch {
            op: "conv2d",
            dim: "input channels",
            lhs: in_c,
            rhs: ws[2],
        });
    }
    let out_c = if spec.depthwise {
        if ws[3] != 1 {
            return Err(TensorError::Mismatch {
                op: "conv2d depthwise",
                dim: "channel multiplier",
                lhs: ws[3],
                rhs: 1,
            });
        }
        in_c
    } else {
        ws[3]
    };
    let geometry = |input, k| {
        AxisGeometry::new(input, k, spec.stride, spec.padding).ok_or(TensorError::Mismatch {
            op: "conv2d valid padding",
            dim: "spatial extent vs kernel",
            lhs: input,
            rhs: k,
        })
    };
    Ok(ConvShape {
        batch,
        in_c,
        out_c,
        kh,
        kw,
        rows: geometry(h, kh)?,
        cols: geometry(w, kw)?,
    })
}

/// Number of multiply-accumulates a convolution performs per sample.
pub fn conv2d_macs(out_h: usize, out_w: usize, in_c: usize, out_c: usize, k: usize, depthwise: bool) -> u64 {
    let per_pixel = if depthwise { out_c * k * k } else { out_c * in_c * k * k };
    (out_h * out_w) as u64 * per_pixel as u64
}

/// 2-D convolution, weights `[kh, kw, in_c, out_c]` (or `[kh, kw, c, 1]` when
/// depthwise). Cross-correlation, as in every deep-learning framework.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let s = conv_shape(input, weight, spec)?;
    if let Some(b) = bias {
        if b.numel() != s.out_c {
            return Err(TensorError::Mismatch {
                op: "conv2d",
                dim: "bias length",
                lhs: b.numel(),
                rhs: s.out_c,
            });
        }
    }
    let (h, w) = (s.rows.input, s.cols.input);
    let (oh, ow) = (s.rows.output, s.cols.output);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); s.batch * oh * ow * s.out_c];
    for b in 0..s.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = ((b * oh + oy) * ow + ox) * s.out_c;
                let acc = &mut out[o_base..o_base + s.out_c];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias.data());
                }
                for ky in 0..s.kh {
                    let Some(iy) = s.rows.source(oy, ky, spec.stride) else {
                        continue;
                    };
                    for kx in 0..s.kw {
                        let Some(ix) = s.cols.source(ox, kx, spec.stride) else {
                            continue;
                        };
                        let i_base = ((b * h + iy) * w + ix) * s.in_c;
                        let px = &x[i_base..i_base + s.in_c];
                        if spec.depthwise {
                            let w_base = (ky * s.kw + kx) * s.in_c;
                            for c in 0..s.in_c {
                                acc[c] += px[c] * wt[w_base + c];
                            }
                        } else {
                            for (ci, &xv) in px.iter().enumerate() {
                                let w_base = ((ky * s.kw + kx) * s.in_c + ci) * s.out_c;
                                let row = &wt[w_base..w_base + s.out_c];
                                for (a, &wv) in acc.iter_mut().zip(row) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![s.batch, oh, ow, s.out_c], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvGrads<T>> {
    let s = conv_shape(input, weight, spec)?;
    let (h, w) = (s.rows.input, s.cols.input);
    let (oh, ow) = (s.rows.output, s.cols.output);
    let expected = [s.batch, oh, ow, s.out_c];
    if grad_out.shape() != expected {
        return Err(mismatch("conv2d backward", grad_out.shape(), &expected));
    }
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); s.out_c];
    for b in 0..s.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = ((b * oh + oy) * ow + ox) * s.out_c;
                let go = &g[o_base..o_base + s.out_c];
                for (acc, &v) in gb.iter_mut().zip(go) {
                    *acc += v;
                }
                for ky in 0..s.kh {
                    let Some(iy) = s.rows.source(oy, ky, spec.stride) else {
                        continue;
                    };
                    for kx in 0..s.kw {
                        let Some(ix) = s.cols.source(ox, kx, spec.stride) else {
                            continue;
                        };
                        let i_base = ((b * h + iy) * w + ix) * s.in_c;
                        if spec.depthwise {
                            let w_base = (ky * s.kw + kx) * s.in_c;
                            for c in 0..s.in_c {
                                gw[w_base + c] += x[i_base + c] * go[c];
                                gx[i_base + c] += wt[w_base + c] * go[c];
                            }
                        } else {
                            for ci in 0..s.in_c {
                                let xv = x[i_base + ci];
                                let w_base = ((ky * s.kw + kx) * s.in_c + ci) * s.out_c;
                                let mut acc = T::zero();
                                for co in 0..s.out_c {
                                    gw[w_base + co] += xv * go[co];
                                    acc += wt[w_base + co] * go[co];
                                }
                                gx[i_base + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![s.out_c], gb)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Batch-norm hyperparameters: `running = momentum·running + (1−momentum)·batch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            momentum: 0.99,
        }
    }
}

/// Intermediate values a batch-norm backward pass needs.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub batch_stats: bool,
}

fn bn_check<T: Scalar>(input: &Tensor<T>, params: &[&Tensor<T>]) -> Result<usize> {
    let c = *input.shape().last().unwrap_or(&0);
    for p in params {
        if p.numel() != c {
            return Err(TensorError::Mismatch {
                op: "batch_norm",
                dim: "parameter length vs channels",
                lhs: p.numel(),
                rhs: c,
            });
        }
    }
    Ok(c)
}

/// Normalizes with either batch statistics (`stats = None`) or the supplied
/// `(mean, var)` and applies the per-channel affine transform.
pub fn batch_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: Option<(&Tensor<T>, &Tensor<T>)>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = bn_check(input, &[gamma, beta])?;
    let x = input.data();
    let count = x.len() / c;
    let (mean, var, batch_stats) = match stats {
        Some((m, v)) => {
            bn_check(input, &[m, v])?;
            (m.data().to_vec(), v.data().to_vec(), false)
        }
        None => {
            let mut mean = vec![T::zero(); c];
            for px in x.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(px) {
                    *m += v;
                }
            }
            let n = T::count(count);
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![T::zero(); c];
            for px in x.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            (mean, var, true)
        }
    };
    let eps_t = T::of(eps);
    let mut inv_std = Vec::with_capacity(c);
    for &v in &var {
        let d = v + eps_t;
        if !(d > T::zero()) {
            return Err(TensorError::NonPositiveVariance(d.to_f64_lossy()));
        }
        inv_std.push(T::one() / d.sqrt());
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        for ch in 0..c {
            let xh = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BnCache {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
            mean,
            var,
            batch_stats,
        },
    ))
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnRunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: f64) {
        let m = T::of(momentum);
        let r = T::one() - m;
        for (run, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *run = m * *run + r * b;
        }
        for (run, &b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *run = m * *run + r * b;
        }
    }
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// folds them into `running`; infer mode normalizes with `running`.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut BnRunningStats<T>,
    cfg: BnConfig,
    mode: Mode,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Infer => {
            batch_norm_forward(input, gamma, beta, Some((&running.mean, &running.var)), cfg.eps).map(|(y, _)| y)
        }
        Mode::Train => {
            let (y, cache) = batch_norm_forward(input, gamma, beta, None, cfg.eps)?;
            running.update(&cache.mean, &cache.var, cfg.momentum);
            Ok(y)
        }
    }
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(mismatch("batch_norm backward", grad_out.shape(), cache.xhat.shape()));
    }
    let c = gamma.numel();
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (gp, xp) in dy.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += gp[ch];
            dgamma[ch] += gp[ch] * xp[ch];
        }
    }
    let g = gamma.data();
    let mut dx = Vec::with_capacity(dy.len());
    if cache.batch_stats {
        let m = T::count(dy.len() / c);
        for (gp, xp) in dy.chunks_exact(c).zip(xh.chunks_exact(c)) {
            for ch in 0..c {
                let k = g[ch] * cache.inv_std[ch] / m;
                dx.push(k * (m * gp[ch] - dbeta[ch] - xp[ch] * dgamma[ch]));
            }
        }
    } else {
        for gp in dy.chunks_exact(c) {
            for ch in 0..c {
                dx.push(g[ch] * cache.inv_std[ch] * gp[ch]);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Concatenates rank-4 tensors along the channel axis, in list order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(TensorError::Unsupported {
        op: "concat",
        what: "input count",
        value: "0".into(),
    })?;
    let [b, h, w, _] = first.dims4("concat")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let [pb, ph, pw, pc] = p.dims4("concat")?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(mismatch("concat", &first.shape()[..3], &p.shape()[..3]));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(b * h * w * total);
    for px in 0..b * h * w {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![b, h, w, total], out)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn concat_backward<T: Scalar>(grad_out: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [b, h, w, total] = grad_out.dims4("concat backward")?;
    if widths.iter().sum::<usize>() != total {
        return Err(TensorError::Mismatch {
            op: "concat backward",
            dim: "channels",
            lhs: widths.iter().sum(),
            rhs: total,
        });
    }
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(b * h * w * c)).collect();
    for px in grad_out.data().chunks_exact(total) {
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&px[off..off + c]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::new(vec![b, h, w, c], d))
        .collect()
}

/// Seed for one dropout draw, keyed by `(seed, layer, step)`.
pub fn dropout_key(seed: u64, layer: u64, step: u64) -> u64 {
    seed ^ layer.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17)
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1/(1−rate)`), which is also the backward mask.
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, key: u64, mode: Mode) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Unsupported {
            op: "dropout",
            what: "rate",
            value: rate.to_string(),
        });
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Some(mask)))
}

/// Max pooling with same padding (padded positions act as −∞). Returns the
/// output and, per output element, the flat input index of its maximum.
pub fn max_pool<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, h, w, c] = x.dims4("max_pool")?;
    if size == 0 || stride == 0 {
        return Err(TensorError::Unsupported {
            op: "max_pool",
            what: "size/stride",
            value: format!("{size}/{stride}"),
        });
    }
    let rows = AxisGeometry::new(h, size, stride, Padding::Same).expect("same padding");
    let cols = AxisGeometry::new(w, size, stride, Padding::Same).expect("same padding");
    let (oh, ow) = (rows.output, cols.output);
    let data = x.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..size {
                        let Some(iy) = rows.source(oy, ky, stride) else {
                            continue;
                        };
                        for kx in 0..size {
                            let Some(ix) = cols.source(ox, kx, stride) else {
                                continue;
                            };
                            let idx = ((bi * h + iy) * w + ix) * c + ch;
                            if best_idx == usize::MAX || data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, oh, ow, c], out)?, argmax))
}

pub fn max_pool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return Err(TensorError::Mismatch {
            op: "max_pool backward",
            dim: "elements",
            lhs: argmax.len(),
            rhs: grad_out.numel(),
        });
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    Ok(gx)
}

/// Integer resize factor for [`resize_bilinear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeFactor {
    Up(usize),
    Down(usize),
}

struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

/// Half-pixel (align-corners = false) source taps for one axis.
fn bilinear_taps(input: usize, output: usize) -> Taps {
    let ratio = input as f64 / output as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
    }
    taps
}

/// Bilinear resize to an explicit spatial size, align-corners = false.
pub fn resize_bilinear_to<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = x.dims4("resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::ZeroExtent(vec![b, out_h, out_w, c]));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let data = x.data();
    let mut out = Vec::with_capacity(b * out_h * out_w * c);
    for bi in 0..b {
        for oy in 0..out_h {
            let fy = T::of(ty.frac[oy]);
            let gy = T::one() - fy;
            for ox in 0..out_w {
                let fx = T::of(tx.frac[ox]);
                let gx = T::one() - fx;
                let at = |iy: usize, ix: usize| ((bi * h + iy) * w + ix) * c;
                let (p00, p01) = (at(ty.lo[oy], tx.lo[ox]), at(ty.lo[oy], tx.hi[ox]));
                let (p10, p11) = (at(ty.hi[oy], tx.lo[ox]), at(ty.hi[oy], tx.hi[ox]));
                for ch in 0..c {
                    let top = gx * data[p00 + ch] + fx * data[p01 + ch];
                    let bottom = gx * data[p10 + ch] + fx * data[p11 + ch];
                    out.push(gy * top + fy * bottom);
                }
            }
        }
    }
    Tensor::new(vec![b, out_h, out_w, c], out)
}

/// Bilinear resize by an integer factor in {1, 2, 4, 8}.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, factor: ResizeFactor) -> Result<Tensor<T>> {
    let [_, h, w, _] = x.dims4("resize_bilinear")?;
    let k = match factor {
        ResizeFactor::Up(k) | ResizeFactor::Down(k) => k,
    };
    if ![1, 2, 4, 8].contains(&k) {
        return Err(TensorError::Unsupported {
            op: "resize_bilinear",
            what: "factor",
            value: k.to_string(),
        });
    }
    let (oh, ow) = match factor {
        ResizeFactor::Up(k) => (h * k, w * k),
        ResizeFactor::Down(k) => {
            if h % k != 0 || w % k != 0 {
                return Err(TensorError::Unsupported {
                    op: "resize_bilinear",
                    what: "resulting extent",
                    value: format!("{h}x{w} / {k}"),
                });
            }
            (h / k, w / k)
        }
    };
    resize_bilinear_to(x, oh, ow)
}

/// Adjoint of [`resize_bilinear_to`]: scatters output gradients back onto
/// the input grid with the forward interpolation weights.
pub fn resize_bilinear_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, out_h, out_w, c] = grad_out.dims4("resize_bilinear backward")?;
    let (h, w) = (input_shape[1], input_shape[2]);
    if (out_h, out_w) == (h, w) {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let g = grad_out.data();
    let mut gx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..out_h {
            let fy = T::of(ty.frac[oy]);
            let gy = T::one() - fy;
            for ox in 0..out_w {
                let fx = T::of(tx.frac[ox]);
                let hx = T::one() - fx;
                let at = |iy: usize, ix: usize| ((bi * h + iy) * w + ix) * c;
                let (p00, p01) = (at(ty.lo[oy], tx.lo[ox]), at(ty.lo[oy], tx.hi[ox]));
                let (p10, p11) = (at(ty.hi[oy], tx.lo[ox]), at(ty.hi[oy], tx.hi[ox]));
                let o_base = ((bi * out_h + oy) * out_w + ox) * c;
                for ch in 0..c {
                    let v = g[o_base + ch];
                    gx[p00 + ch] += gy * hx * v;
                    gx[p01 + ch] += gy * fx * v;
                    gx[p10 + ch] += fy * hx * v;
                    gx[p11 + ch] += fy * fx * v;
                }
            }
        }
    }
    Tensor::new(vec![b, h, w, c], gx)
}

/// Masked mean cross entropy and the softmax probabilities backward needs.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    pub loss: T,
    /// Number of pixels that entered the mean; `0` means every pixel was
    /// ignored and `loss` is defined as zero.
    pub valid: usize,
    pub probs: Tensor<T>,
}

impl<T> CrossEntropy<T> {
    pub fn all_ignored(&self) -> bool {
        self.valid == 0
    }
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`.
pub fn softmax_cross_entropy_masked<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    ignore: u8,
) -> Result<CrossEntropy<T>> {
    let [b, h, w, c] = logits.dims4("cross_entropy")?;
    if labels.shape() != [b, h, w] {
        return Err(mismatch("cross_entropy", &[b, h, w], &labels.shape()));
    }
    let mut probs = Vec::with_capacity(logits.numel());
    let mut total = T::zero();
    let mut valid = 0usize;
    for (i, (px, &label)) in logits.data().chunks_exact(c).zip(labels.data()).enumerate() {
        let max = px.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for &v in px {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        for &v in px {
            probs.push((v - log_z).exp());
        }
        if label == ignore {
            continue;
        }
        if label as usize >= c {
            return Err(TensorError::BadLabel {
                label,
                index: i,
                classes: c,
                ignore,
            });
        }
        total += log_z - px[label as usize];
        valid += 1;
    }
    let loss = if valid == 0 {
        log::warn!("cross entropy: every pixel carries the ignore label");
        T::zero()
    } else {
        total / T::count(valid)
    };
    Ok(CrossEntropy {
        loss,
        valid,
        probs: Tensor::new(logits.shape().to_vec(), probs)?,
    })
}

/// Gradient of the masked mean cross entropy w.r.t. the logits, scaled by
/// the upstream scalar gradient.
pub fn cross_entropy_backward<T: Scalar>(
    ce: &CrossEntropy<T>,
    labels: &LabelMap,
    ignore: u8,
    upstream: T,
) -> Tensor<T> {
    let c = *ce.probs.shape().last().unwrap();
    let mut g = Tensor::zeros(ce.probs.shape());
    if ce.valid == 0 {
        return g;
    }
    let k = upstream / T::count(ce.valid);
    for ((gp, pp), &label) in g
        .data_mut()
        .chunks_exact_mut(c)
        .zip(ce.probs.data().chunks_exact(c))
        .zip(labels.data())
    {
        if label == ignore {
            continue;
        }
        for (j, (gv, &p)) in gp.iter_mut().zip(pp).enumerate() {
            let onehot = if j == label as usize { T::one() } else { T::zero() };
            *gv = k * (p - onehot);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    const SAME1: ConvSpec = ConvSpec {
        stride: 1,
        padding: Padding::Same,
        depthwise: false,
    };

    /// Independent MAC counter: counts innermost-loop iterations of a naive
    /// convolution that also visits padded taps, minus the padded ones.
    fn counted_macs(h: usize, w: usize, in_c: usize, out_c: usize, k: usize, depthwise: bool) -> u64 {
        let mut n = 0u64;
        for _oy in 0..h {
            for _ox in 0..w {
                for _co in 0..out_c {
                    for _ky in 0..k {
                        for _kx in 0..k {
                            if depthwise {
                                n += 1;
                            } else {
                                for _ci in 0..in_c {
                                    n += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn conv_output_shape_and_macs() {
        let x = Tensor::<f32>::full(&[1, 8, 8, 3], 0.5);
        let w = Tensor::<f32>::full(&[3, 3, 3, 16], 0.1);
        let y = conv2d(&x, &w, None, SAME1).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 16]);
        assert_eq!(counted_macs(8, 8, 3, 16, 3, false), 27_648);
        assert_eq!(conv2d_macs(8, 8, 3, 16, 3, false), 27_648);

        let x = Tensor::<f32>::full(&[1, 8, 8, 16], 0.5);
        let w = Tensor::<f32>::full(&[3, 3, 16, 1], 0.1);
        let spec = ConvSpec {
            depthwise: true,
            ..SAME1
        };
        assert_eq!(conv2d(&x, &w, None, spec).unwrap().shape(), &[1, 8, 8, 16]);
        assert_eq!(counted_macs(8, 8, 16, 16, 3, true), 9_216);
        assert_eq!(conv2d_macs(8, 8, 16, 16, 3, true), 9_216);
    }

    #[test]
    fn conv_of_zeros_is_zero() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 1]);
        let w = Tensor::<f32>::from_fn(&[3, 3, 1, 2], |i| i as f32 - 4.0);
        let y = conv2d(&x, &w, None, SAME1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 3]);
        let w = Tensor::<f32>::zeros(&[3, 3, 2, 4]);
        let err = conv2d(&x, &w, None, SAME1).unwrap_err();
        assert!(
            matches!(
                err,
                TensorError::Mismatch {
                    dim: "input channels",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn strided_same_conv_uses_ceil_extent() {
        for (n, expect) in [(7, 4), (8, 4), (45, 23), (1, 1)] {
            let x = Tensor::<f32>::zeros(&[1, n, n, 1]);
            let w = Tensor::<f32>::zeros(&[3, 3, 1, 1]);
            let spec = ConvSpec { stride: 2, ..SAME1 };
            assert_eq!(conv2d(&x, &w, None, spec).unwrap().shape(), &[1, expect, expect, 1]);
        }
        let x = Tensor::<f32>::zeros(&[1, 8, 8, 1]);
        let w = Tensor::<f32>::zeros(&[3, 3, 1, 1]);
        let spec = ConvSpec {
            padding: Padding::Valid,
            ..SAME1
        };
        assert_eq!(conv2d(&x, &w, None, spec).unwrap().shape(), &[1, 6, 6, 1]);
    }

    #[test]
    fn bn_infer_identity_and_hand_value() {
        let x = t4([1, 1, 2, 1], vec![1.0, -3.0]);
        let one = Tensor::scalar(1.0);
        let zero = Tensor::scalar(0.0);
        let (y, _) = batch_norm_forward(&x, &one, &zero, Some((&zero, &one)), 0.0).unwrap();
        assert_eq!(y, x);

        let x = t4([1, 1, 1, 1], vec![1.0]);
        let (y, _) = batch_norm_forward(
            &x,
            &Tensor::scalar(2.0),
            &Tensor::scalar(1.0),
            Some((&Tensor::scalar(0.5), &Tensor::scalar(0.25))),
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn bn_train_constant_channel_gives_beta() {
        let x = Tensor::<f64>::full(&[2, 3, 3, 2], 4.25);
        let gamma = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut stats = BnRunningStats::new(2);
        let y = batch_norm(&x, &gamma, &beta, &mut stats, BnConfig::default(), Mode::Train).unwrap();
        for px in y.data().chunks(2) {
            assert_eq!(px, &[0.3, -0.7]);
        }
        // running mean moved 1% toward the batch mean
        assert!((stats.mean.data()[0] - 0.0425).abs() < 1e-12);
        assert!((stats.var.data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn bn_zero_variance_without_eps_is_an_error() {
        let x = Tensor::<f64>::full(&[1, 2, 2, 1], 1.0);
        let one = Tensor::scalar(1.0);
        let zero = Tensor::scalar(0.0);
        let err = batch_norm_forward(&x, &one, &zero, None, 0.0).unwrap_err();
        assert!(matches!(err, TensorError::NonPositiveVariance(_)));
    }

    #[test]
    fn pointwise_examples() {
        let x = t4([1, 1, 1, 2], vec![-1.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let a = Tensor::<f32>::zeros(&[1, 4, 4, 3]);
        let b = Tensor::<f32>::zeros(&[1, 4, 4, 5]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), &[1, 4, 4, 8]);
        let c = Tensor::<f32>::zeros(&[1, 2, 4, 5]);
        assert!(concat_channels(&[&a, &c]).is_err());
        assert!(add(&a, &b).is_err());
        let x = Tensor::<f32>::from_fn(&[1, 3, 3, 2], |i| i as f32);
        for seed in [0, 7, 99] {
            let (y, mask) = dropout(&x, 0.0, seed, Mode::Train).unwrap();
            assert_eq!(y, x);
            assert!(mask.is_none());
        }
    }

    #[test]
    fn concat_preserves_order() {
        let a = t4([1, 1, 1, 2], vec![1.0, 2.0]);
        let b = t4([1, 1, 1, 1], vec![3.0]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(concat_channels(&[&b, &a]).unwrap().data(), &[3.0, 1.0, 2.0]);
    }

    #[test]
    fn dropout_scales_survivors_and_is_deterministic() {
        let x = Tensor::<f64>::full(&[1, 16, 16, 4], 1.0);
        let (y1, _) = dropout(&x, 0.25, dropout_key(3, 5, 11), Mode::Train).unwrap();
        let (y2, _) = dropout(&x, 0.25, dropout_key(3, 5, 11), Mode::Train).unwrap();
        assert_eq!(y1, y2);
        let zeros = y1.data().iter().filter(|&&v| v == 0.0).count();
        assert!(y1.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        assert!((150..360).contains(&zeros), "{zeros} of 1024 dropped");
        let (y3, _) = dropout(&x, 0.25, dropout_key(3, 5, 12), Mode::Train).unwrap();
        assert_ne!(y1, y3);
        assert_eq!(dropout(&x, 0.25, 0, Mode::Infer).unwrap().0, x);
    }

    #[test]
    fn max_pool_examples() {
        let x = t4([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(max_pool(&x, 2, 2).unwrap().0.data(), &[4.0]);

        let ramp = t4([1, 4, 4, 1], (0..16).map(f64::from).collect());
        let (y, _) = max_pool(&ramp, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);

        let c = Tensor::<f64>::full(&[1, 6, 6, 3], -2.5);
        let (y, _) = max_pool(&c, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == -2.5));

        // odd extent: the trailing window holds one real row, padding is −∞
        let odd = Tensor::<f64>::full(&[1, 3, 3, 1], -7.0);
        let (y, _) = max_pool(&odd, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert!(y.data().iter().all(|&v| v == -7.0));

        assert!(matches!(
            max_pool(&Tensor::<f64>::zeros(&[4, 4]), 2, 2),
            Err(TensorError::Rank { .. })
        ));
    }

    #[test]
    fn resize_examples() {
        let c = Tensor::<f32>::full(&[1, 3, 5, 2], 5.0);
        let up = resize_bilinear(&c, ResizeFactor::Up(8)).unwrap();
        assert_eq!(up.shape(), &[1, 24, 40, 2]);
        assert!(up.data().iter().all(|&v| v == 5.0));

        // hand-computed half-pixel weights: rows/cols use (1,0),(.75,.25),(.25,.75),(0,1)
        let x = t4([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = resize_bilinear(&x, ResizeFactor::Up(2)).unwrap();
        let axis = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        let mut expect = Vec::new();
        for (ry0, ry1) in axis {
            for (rx0, rx1) in axis {
                let top = rx0 * 1.0 + rx1 * 2.0;
                let bottom = rx0 * 3.0 + rx1 * 4.0;
                expect.push(ry0 * top + ry1 * bottom);
            }
        }
        assert_eq!(y.data(), expect.as_slice());

        assert_eq!(resize_bilinear(&x, ResizeFactor::Up(1)).unwrap(), x);
        assert!(resize_bilinear(&x, ResizeFactor::Up(3)).is_err());
        let odd = Tensor::<f32>::zeros(&[1, 6, 4, 1]);
        assert!(resize_bilinear(&odd, ResizeFactor::Down(4)).is_err());
    }

    #[test]
    fn resize_preserves_interior_ramps() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 8, 1], |i| 3.0 * i as f64 + 1.0);
        let y = resize_bilinear(&x, ResizeFactor::Up(2)).unwrap();
        // half-pixel mapping: output j samples input (j + 0.5)/2 − 0.5
        for j in 1..15 {
            let src = (j as f64 + 0.5) / 2.0 - 0.5;
            assert!((y.data()[j] - (3.0 * src + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 2, 4]);
        let labels = LabelMap::new([1, 2, 2], vec![0, 1, 2, 3]).unwrap();
        let ce = softmax_cross_entropy_masked(&logits, &labels, 255).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-12);

        let mut confident = Tensor::<f32>::zeros(&[1, 1, 1, 3]);
        confident.data_mut()[1] = 1e3;
        let labels = LabelMap::new([1, 1, 1], vec![1]).unwrap();
        assert_eq!(
            softmax_cross_entropy_masked(&confident, &labels, 255).unwrap().loss,
            0.0
        );

        let logits = Tensor::<f64>::from_fn(&[1, 1, 2, 2], |i| if i < 2 { 5.0 * i as f64 } else { 0.0 });
        let labels = LabelMap::new([1, 1, 2], vec![255, 1]).unwrap();
        let ce = softmax_cross_entropy_masked(&logits, &labels, 255).unwrap();
        assert!((ce.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(ce.valid, 1);

        let all_ignored = LabelMap::filled([1, 1, 2], 255);
        let ce = softmax_cross_entropy_masked(&logits, &all_ignored, 255).unwrap();
        assert!(ce.all_ignored());
        assert_eq!(ce.loss, 0.0);

        let bad = LabelMap::new([1, 1, 2], vec![0, 2]).unwrap();
        assert!(matches!(
            softmax_cross_entropy_masked(&logits, &bad, 255),
            Err(TensorError::BadLabel { label: 2, .. })
        ));
    }
}
