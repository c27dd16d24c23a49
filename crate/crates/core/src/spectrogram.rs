//! Log-magnitude short-time Fourier spectrograms.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPG1";
/// Added to every magnitude before taking the logarithm.
pub const MAGNITUDE_FLOOR: f64 = 1e-10;

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| 0.5 - 0.5 * (2.0 * PI * t as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed DFT of fixed length.
#[derive(Clone)]
pub struct Stft {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(window_size: usize) -> Result<Self> {
        if window_size < 2 || !window_size.is_power_of_two() {
            return Err(Error::input(format!(
                "window size {window_size} must be a power of two >= 2"
            )));
        }
        Ok(Self {
            window: hann(window_size),
            fft: FftPlanner::new().plan_fft_forward(window_size),
        })
    }

    pub fn window_size(&self) -> usize {
        self.window.len()
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// All `N` bins of the windowed transform.
    pub fn full_frame(&self, samples: &[f64]) -> Result<Vec<Complex64>> {
        if samples.len() != self.window.len() {
            return Err(Error::input(format!(
                "STFT frame has {} samples, expected {}",
                samples.len(),
                self.window.len()
            )));
        }
        let mut buf: Vec<Complex64> = samples
            .iter()
            .zip(&self.window)
            .map(|(s, w)| Complex64::new(s * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        Ok(buf)
    }

    /// Bins `0..N/2`; the upper half mirrors them for real input.
    pub fn frame(&self, samples: &[f64]) -> Result<Vec<Complex64>> {
        let mut bins = self.full_frame(samples)?;
        bins.truncate(self.window.len() / 2);
        Ok(bins)
    }
}

/// `n x m` grid of dB magnitudes: rows are frequency bins, columns frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramMatrix {
    /// Row-major `rows x cols`.
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    window_size: usize,
    sample_rate: u32,
}

/// `floor((len - N) / (N/2)) + 1`, or zero when the clip is shorter than a
/// window.
pub fn frame_count(len: usize, window_size: usize) -> usize {
    if len < window_size {
        0
    } else {
        (len - window_size) / (window_size / 2) + 1
    }
}

pub fn spectrogram(clip: &AudioClip, window_size: usize) -> Result<SpectrogramMatrix> {
    spectrogram_with(clip, window_size, None)
}

/// As [`spectrogram`]; with `pad_to_frames`, the signal tail is zero-padded
/// or cut so the result has exactly that many columns.
pub fn spectrogram_with(
    clip: &AudioClip,
    window_size: usize,
    pad_to_frames: Option<usize>,
) -> Result<SpectrogramMatrix> {
    let stft = Stft::new(window_size)?;
    let samples = clip.samples();
    if samples.len() < window_size {
        return Err(Error::input(format!(
            "clip of {} samples is shorter than the {window_size}-sample window",
            samples.len()
        )));
    }
    let hop = window_size / 2;
    let cols = match pad_to_frames {
        Some(0) => return Err(Error::input("pad_to_frames must be positive")),
        Some(m) => m,
        None => frame_count(samples.len(), window_size),
    };
    let needed = (cols - 1) * hop + window_size;
    let padded;
    let source = if needed > samples.len() {
        let mut p = samples.to_vec();
        p.resize(needed, 0.0);
        padded = p;
        &padded[..]
    } else {
        samples
    };
    let rows = window_size / 2;
    let mut values = vec![0.0; rows * cols];
    for c in 0..cols {
        let bins = stft.frame(&source[c * hop..c * hop + window_size])?;
        for (r, bin) in bins.iter().enumerate() {
            values[r * cols + c] = 20.0 * (bin.norm() + MAGNITUDE_FLOOR).log10();
        }
    }
    Ok(SpectrogramMatrix {
        values,
        rows,
        cols,
        window_size,
        sample_rate: clip.sample_rate(),
    })
}

impl SpectrogramMatrix {
    pub fn from_values(
        values: Vec<f64>,
        rows: usize,
        cols: usize,
        window_size: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} spectrogram",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("spectrogram values must be finite"));
        }
        Ok(Self {
            values,
            rows,
            cols,
            window_size,
            sample_rate,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.window_size / 2
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Little-endian `SPG1`: magic, N, n, m, sample rate (u32 each), then
    /// `n*m` f32 values column by column.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        for v in [self.window_size, self.rows, self.cols, self.sample_rate as usize] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.extend_from_slice(&(self.get(r, c) as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(Error::format("bad magic, expected SPG1"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (window_size, rows, cols, rate) = (
            word(0) as usize,
            word(1) as usize,
            word(2) as usize,
            word(3),
        );
        if rows.checked_mul(cols).and_then(|c| c.checked_mul(4)) != Some(bytes.len() - 20) {
            return Err(Error::format("SPG1 payload size does not match header"));
        }
        let mut values = vec![0.0; rows * cols];
        for (i, chunk) in bytes[20..].chunks_exact(4).enumerate() {
            let (c, r) = (i / rows, i % rows);
            values[r * cols + c] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        Self::from_values(values, rows, cols, window_size, rate)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
