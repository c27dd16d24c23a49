//! Sine-windowed, orthonormal MDCT with 50% overlap-add synthesis.
//!
//! The forward transform folds the windowed `2N` block into a length-`N`
//! DCT-IV, which is evaluated with an `N/2`-point complex FFT. With the
//! `sqrt(2/N)` scaling on both sides, analysis followed by overlap-add
//! synthesis is the identity on every sample covered by two frames.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Precomputed MDCT of `frame_len` coefficients per `2 * frame_len` block.
#[derive(Clone)]
pub struct Mdct {
    frame_len: usize,
    window: Vec<f64>,
    pre: Vec<Complex64>,
    post: Vec<Complex64>,
    fft: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Mdct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mdct").field("frame_len", &self.frame_len).finish()
    }
}

/// `w[k] = sin(pi (k + 0.5) / (2N))` over a `2N` block.
pub fn sine_window(frame_len: usize) -> Vec<f64> {
    let two_n = 2 * frame_len;
    (0..two_n)
        .map(|k| (PI * (k as f64 + 0.5) / two_n as f64).sin())
        .collect()
}

impl Mdct {
    pub fn new(frame_len: usize) -> Result<Self> {
        if frame_len < 4 || frame_len % 4 != 0 {
            return Err(Error::input(format!(
                "MDCT frame length {frame_len} must be a positive multiple of 4"
            )));
        }
        let n = frame_len as f64;
        let half = frame_len / 2;
        let pre = (0..half)
            .map(|m| Complex64::from_polar(1.0, -PI * (4 * m + 1) as f64 / (4.0 * n)))
            .collect();
        let post = (0..half)
            .map(|k| Complex64::from_polar(1.0, -PI * k as f64 / n))
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(half);
        Ok(Self {
            frame_len,
            window: sine_window(frame_len),
            pre,
            post,
            fft,
            scale: (2.0 / n).sqrt(),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Unscaled DCT-IV: `out[k] = sum_n v[n] cos(pi/N (n + 1/2)(k + 1/2))`.
    fn dct4(&self, v: &[f64], out: &mut [f64]) {
        let n = self.frame_len;
        let mut buf: Vec<Complex64> = (0..n / 2)
            .map(|m| Complex64::new(v[2 * m], v[n - 1 - 2 * m]) * self.pre[m])
            .collect();
        self.fft.process(&mut buf);
        for (k, (c, tw)) in buf.iter().zip(&self.post).enumerate() {
            let d = c * tw;
            out[2 * k] = d.re;
            out[n - 1 - 2 * k] = -d.im;
        }
    }

    /// Windowed forward MDCT of one `2N` block.
    pub fn forward(&self, block: &[f64]) -> Result<Vec<f64>> {
        let n = self.frame_len;
        if block.len() != 2 * n {
            return Err(Error::input(format!(
                "MDCT block has {} samples, expected {}",
                block.len(),
                2 * n
            )));
        }
        let h = n / 2;
        let x: Vec<f64> = block.iter().zip(&self.window).map(|(s, w)| s * w).collect();
        // quarters (a, b, c, d) fold into (-c_r - d, a - b_r)
        let mut v = vec![0.0; n];
        for i in 0..h {
            v[i] = -x[3 * h - 1 - i] - x[3 * h + i];
            v[h + i] = x[i] - x[n - 1 - i];
        }
        let mut out = vec![0.0; n];
        self.dct4(&v, &mut out);
        out.iter_mut().for_each(|c| *c *= self.scale);
        Ok(out)
    }

    /// Windowed inverse MDCT of one frame, `2N` samples ready for overlap-add.
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        let n = self.frame_len;
        if coeffs.len() != n {
            return Err(Error::input(format!(
                "MDCT frame has {} coefficients, expected {n}",
                coeffs.len()
            )));
        }
        let h = n / 2;
        let mut u = vec![0.0; n];
        self.dct4(coeffs, &mut u);
        let mut y = vec![0.0; 2 * n];
        for i in 0..h {
            y[i] = u[h + i];
            y[h + i] = -u[n - 1 - i];
            y[n + i] = -u[h - 1 - i];
            y[3 * h + i] = -u[i];
        }
        y.iter_mut()
            .zip(&self.window)
            .for_each(|(s, w)| *s *= w * self.scale);
        Ok(y)
    }

    /// Inverse-transforms every frame and overlap-adds at hop `N`. The output
    /// has `(frames + 1) * N` samples; the first and last `N` are only
    /// half-reconstructed.
    pub fn inverse_ola(&self, frames: &[Vec<f64>]) -> Result<Vec<f64>> {
        if frames.len() < 2 {
            return Err(Error::input("overlap-add needs at least two frames"));
        }
        let n = self.frame_len;
        let mut out = vec![0.0; (frames.len() + 1) * n];
        for (f, coeffs) in frames.iter().enumerate() {
            let y = self.inverse(coeffs)?;
            out[f * n..f * n + 2 * n]
                .iter_mut()
                .zip(&y)
                .for_each(|(o, s)| *o += s);
        }
        Ok(out)
    }

    /// Number of frames used to cover `len` samples: one leading frame of
    /// zero padding plus enough frames to reach past the end.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.frame_len) + 1
    }

    /// Frames the signal with `N` leading zeros so every input sample sits
    /// under two frames, and returns the MDCT of each block.
    pub fn analyze(&self, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.frame_len;
        let frames = self.frames_for(samples.len());
        let mut padded = vec![0.0; (frames + 1) * n];
        padded[n..n + samples.len()].copy_from_slice(samples);
        (0..frames)
            .map(|f| self.forward(&padded[f * n..f * n + 2 * n]))
            .collect()
    }

    /// Inverse of [`Mdct::analyze`]: returns exactly `len` samples.
    pub fn synthesize(&self, frames: &[Vec<f64>], len: usize) -> Result<Vec<f64>> {
        let n = self.frame_len;
        let out = self.inverse_ola(frames)?;
        if n + len > out.len() {
            return Err(Error::input(format!(
                "{} frames cannot cover {len} samples",
                frames.len()
            )));
        }
        Ok(out[n..n + len].to_vec())
    }
}
