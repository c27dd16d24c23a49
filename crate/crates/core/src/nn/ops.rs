//! Stateless forward and backward kernels for the network layers.
//!
//! Convolutions use the cross-correlation convention with zero padding and
//! are lowered to one GEMM per sample via im2col.

use super::scalar::Scalar;
use super::tensor::Tensor4;
use crate::error::{Error, Result};

/// Geometry of a square-kernel convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub const fn same(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn out_dim(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds one `c x h x w` sample into a `(c k k) x (oh ow)` matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, win: Window, col: &mut Vec<T>) {
    let (oh, ow) = (win.out_dim(h), win.out_dim(w));
    let k = win.kernel;
    col.clear();
    col.resize(c * k * k * oh * ow, T::zero());
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if win.stride == 1 {
                        let shift = kx as isize - win.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column matrix back, accumulating into `dx`.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, win: Window, dx: &mut [T]) {
    let (oh, ow) = (win.out_dim(h), win.out_dim(w));
    let k = win.kernel;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let srcm = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &srcm[oy * ow..(oy + 1) * ow];
                    if win.stride == 1 {
                        let shift = kx as isize - win.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            for (d, &s) in dst[s0..s0 + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d = *d + s;
                            }
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `weight` is `c_out x c_in x k x k`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    c_out: usize,
    win: Window,
) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.shape();
    let kk = c * win.kernel * win.kernel;
    if weight.len() != c_out * kk {
        return Err(Error::Shape(format!(
            "convolution expects {} input channels, weights hold {}",
            c,
            weight.len() / (c_out * win.kernel * win.kernel).max(1)
        )));
    }
    let (oh, ow) = (win.out_dim(h), win.out_dim(w));
    let mut y = Tensor4::zeros([b, c_out, oh, ow]);
    let mut col = Vec::new();
    for i in 0..b {
        im2col(x.sample(i), c, h, w, win, &mut col);
        T::gemm(c_out, kk, oh * ow, weight, false, &col, false, T::zero(), y.sample_mut(i));
    }
    Ok(y)
}

/// Returns the input gradient and accumulates the weight gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    dy: &Tensor4<T>,
    win: Window,
    dweight: &mut [T],
    need_dx: bool,
) -> Option<Tensor4<T>> {
    let [b, c, h, w] = x.shape();
    let c_out = dy.channels();
    let kk = c * win.kernel * win.kernel;
    let p = dy.plane();
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    let mut col = Vec::new();
    let mut dcol = vec![T::zero(); kk * p];
    for i in 0..b {
        im2col(x.sample(i), c, h, w, win, &mut col);
        T::gemm(c_out, p, kk, dy.sample(i), false, &col, true, T::one(), dweight);
        if let Some(dx) = dx.as_mut() {
            T::gemm(kk, c_out, p, weight, true, dy.sample(i), false, T::zero(), &mut dcol);
            col2im(&dcol, c, h, w, win, dx.sample_mut(i));
        }
    }
    dx
}

/// Sum in f64 over eight lanes, combined in a fixed order.
fn lanes_f64<T: Scalar>(a: &[T], f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let full = a.len() / 8 * 8;
    for base in (0..full).step_by(8) {
        for (l, slot) in acc.iter_mut().enumerate() {
            *slot += f(base + l);
        }
    }
    let tail: f64 = (full..a.len()).map(&f).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn sum_f64<T: Scalar>(a: &[T]) -> f64 {
    lanes_f64(a, |i| a[i].as_f64())
}

fn sq_dev_f64<T: Scalar>(a: &[T], m: f64) -> f64 {
    lanes_f64(a, |i| (a[i].as_f64() - m) * (a[i].as_f64() - m))
}

fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    lanes_f64(a, |i| a[i].as_f64() * b[i].as_f64())
}

/// Per-channel statistics cached by a training-mode batch norm pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes with batch statistics. Returns the output, the cache for the
/// backward pass, and the batch mean and unbiased variance.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor4<T>, BnCache<T>, Vec<T>, Vec<T>) {
    let [b, c, _, _] = x.shape();
    let p = x.plane();
    let count = b * p;
    let n = T::from_f64(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for i in 0..b {
            let s = &x.sample(i)[ch * p..(ch + 1) * p];
            sum += sum_f64(s);
        }
        let m = sum / count as f64;
        let mut sq = 0.0f64;
        for i in 0..b {
            let s = &x.sample(i)[ch * p..(ch + 1) * p];
            sq += sq_dev_f64(s, m);
        }
        mean[ch] = T::from_f64(m);
        var[ch] = T::from_f64(sq / count as f64);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut xhat = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    for i in 0..b {
        for ch in 0..c {
            let r = ch * p..(ch + 1) * p;
            let (m, s, g, bb) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = &x.sample(i)[r.clone()];
            let xh = &mut xhat.sample_mut(i)[r.clone()];
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - m) * s;
            }
            let xh = &xhat.sample(i)[r.clone()];
            let out = &mut y.sample_mut(i)[r];
            for (o, &v) in out.iter_mut().zip(xh) {
                *o = g * v + bb;
            }
        }
    }
    let unbiased = if count > 1 {
        var.iter().map(|&v| v * n / (n - T::one())).collect()
    } else {
        var
    };
    (y, BnCache { xhat, inv_std }, mean, unbiased)
}

pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Tensor4<T> {
    let [b, c, _, _] = x.shape();
    let p = x.plane();
    let mut y = x.clone();
    for i in 0..b {
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch].max(T::zero()) + eps).sqrt();
            let shift = beta[ch] - mean[ch] * scale;
            for v in &mut y.sample_mut(i)[ch * p..(ch + 1) * p] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

/// Gradient of a training-mode batch norm; accumulates into `dgamma` and
/// `dbeta`.
pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor4<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor4<T> {
    let [b, c, _, _] = dy.shape();
    let p = dy.plane();
    let n = T::from_f64((b * p) as f64);
    let mut dx = Tensor4::zeros(dy.shape());
    for ch in 0..c {
        let r = ch * p..(ch + 1) * p;
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for i in 0..b {
            let d = &dy.sample(i)[r.clone()];
            let xh = &cache.xhat.sample(i)[r.clone()];
            sum_dy += sum_f64(d);
            sum_dy_xhat += dot_f64(d, xh);
        }
        dbeta[ch] = dbeta[ch] + T::from_f64(sum_dy);
        dgamma[ch] = dgamma[ch] + T::from_f64(sum_dy_xhat);
        let k = gamma[ch] * cache.inv_std[ch] / n;
        let (sd, sdx) = (T::from_f64(sum_dy), T::from_f64(sum_dy_xhat));
        for i in 0..b {
            let d = &dy.sample(i)[r.clone()];
            let xh = &cache.xhat.sample(i)[r.clone()];
            let out = &mut dx.sample_mut(i)[r.clone()];
            for ((o, &g), &v) in out.iter_mut().zip(d).zip(xh) {
                *o = k * (n * g - sd - v * sdx);
            }
        }
    }
    dx
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    // NaN passes through so divergence stays visible
    y.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
    y
}

/// Passes `dy` where the forward input (or output) was positive.
pub fn relu_backward<T: Scalar>(activated: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(activated.data())
        .for_each(|(d, &a)| {
            if a <= T::zero() {
                *d = T::zero();
            }
        });
    dx
}

const POOL: Window = Window::same(3, 2);

/// 3x3 average pool, stride 2, zero padding 1, constant divisor 9.
pub fn avg_pool_3x3_s2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (POOL.out_dim(h), POOL.out_dim(w));
    let ninth = T::from_f64(1.0 / 9.0);
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    for i in 0..b {
        for ch in 0..c {
            let src = &x.sample(i)[ch * h * w..(ch + 1) * h * w];
            let dst = &mut y.sample_mut(i)[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                let y0 = (2 * oy).saturating_sub(1);
                let y1 = (2 * oy + 2).min(h);
                for ox in 0..ow {
                    let x0 = (2 * ox).saturating_sub(1);
                    let x1 = (2 * ox + 2).min(w);
                    let mut acc = T::zero();
                    for iy in y0..y1 {
                        for &v in &src[iy * w + x0..iy * w + x1] {
                            acc = acc + v;
                        }
                    }
                    dst[oy * ow + ox] = acc * ninth;
                }
            }
        }
    }
    y
}

pub fn avg_pool_3x3_s2_backward<T: Scalar>(input_shape: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = input_shape;
    let (oh, ow) = (dy.height(), dy.width());
    let ninth = T::from_f64(1.0 / 9.0);
    let mut dx = Tensor4::zeros(input_shape);
    for i in 0..b {
        for ch in 0..c {
            let src = &dy.sample(i)[ch * oh * ow..(ch + 1) * oh * ow];
            let dst = &mut dx.sample_mut(i)[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let y0 = (2 * oy).saturating_sub(1);
                let y1 = (2 * oy + 2).min(h);
                for ox in 0..ow {
                    let g = src[oy * ow + ox] * ninth;
                    let x0 = (2 * ox).saturating_sub(1);
                    let x1 = (2 * ox + 2).min(w);
                    for iy in y0..y1 {
                        for d in &mut dst[iy * w + x0..iy * w + x1] {
                            *d = *d + g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel spatial mean; returns `batch x channels` row-major.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Vec<T> {
    let p = x.plane();
    let inv = T::from_f64(1.0 / p as f64);
    x.data()
        .chunks_exact(p)
        .map(|plane| T::from_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>()) * inv)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: [usize; 4], dy: &[T]) -> Tensor4<T> {
    let p = input_shape[2] * input_shape[3];
    let inv = T::from_f64(1.0 / p as f64);
    let mut dx = Tensor4::zeros(input_shape);
    dx.data_mut()
        .chunks_exact_mut(p)
        .zip(dy)
        .for_each(|(plane, &g)| plane.iter_mut().for_each(|v| *v = g * inv));
    dx
}

/// `y = x W^T + b` for `x: batch x d_in`, `W: d_out x d_in`.
pub fn linear<T: Scalar>(x: &[T], batch: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let d_out = bias.len();
    let d_in = weight.len() / d_out;
    let mut y: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
    T::gemm(batch, d_in, d_out, x, false, weight, true, T::one(), &mut y);
    y
}

/// Returns `dx`; accumulates into `dweight` and `dbias`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let d_out = dbias.len();
    let d_in = weight.len() / d_out;
    T::gemm(d_out, batch, d_in, dy, true, x, false, T::one(), dweight);
    for row in dy.chunks_exact(d_out) {
        dbias.iter_mut().zip(row).for_each(|(b, &g)| *b = *b + g);
    }
    let mut dx = vec![T::zero(); batch * d_in];
    T::gemm(batch, d_out, d_in, dy, false, weight, false, T::zero(), &mut dx);
    dx
}

/// Row-wise softmax of `batch x classes` logits.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(classes) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
) -> (f64, Vec<T>) {
    let batch = labels.len();
    let probs = softmax(logits, classes);
    let inv = T::from_f64(1.0 / batch as f64);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        grad[i * classes + label] = grad[i * classes + label] - T::one();
    }
    grad.iter_mut().for_each(|g| *g = *g * inv);
    (loss / batch as f64, grad)
}
