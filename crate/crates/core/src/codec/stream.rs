//! The toy perceptual codec: MDCT, uniform scalar quantization, and the
//! `SCS1` container for quantized streams.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mdct::Mdct;
use crate::audio::AudioClip;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCS1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// MDCT coefficients per frame.
    pub frame_len: usize,
    /// Quantizer step.
    pub quant_step: f64,
    /// Seed for message generation and carrier selection.
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            quant_step: 0.005,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 32 || !self.frame_len.is_power_of_two() {
            return Err(Error::input(format!(
                "frame_len {} must be a power of two >= 32",
                self.frame_len
            )));
        }
        if !(self.quant_step > 0.0 && self.quant_step.is_finite()) {
            return Err(Error::input(format!(
                "quant_step {} must be positive",
                self.quant_step
            )));
        }
        Ok(())
    }
}

/// One frame of quantized MDCT coefficients with the step used to produce
/// them. The step differs from the stream default only after PARITY
/// embedding re-quantized the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFrame {
    pub step: f64,
    pub coeffs: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedStream {
    pub config: CodecConfig,
    pub frames: Vec<QuantizedFrame>,
    pub sample_rate: u32,
    pub num_samples: usize,
    /// Unquantized MDCT coefficients kept from encoding, used when a frame
    /// has to be re-quantized. Not serialized.
    pub source: Option<Vec<Vec<f64>>>,
}

/// Uniform quantization, ties rounded away from zero.
pub fn quantize(coeff: f64, step: f64) -> i32 {
    (coeff / step).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

pub fn quantize_frame(coeffs: &[f64], step: f64) -> Vec<i32> {
    coeffs.iter().map(|&c| quantize(c, step)).collect()
}

pub fn encode_clip(clip: &AudioClip, config: &CodecConfig) -> Result<CodedStream> {
    config.validate()?;
    if clip.len() < 2 * config.frame_len {
        return Err(Error::input(format!(
            "clip of {} samples is shorter than two frames ({})",
            clip.len(),
            2 * config.frame_len
        )));
    }
    let mdct = Mdct::new(config.frame_len)?;
    let source = mdct.analyze(clip.samples())?;
    let frames = source
        .iter()
        .map(|c| QuantizedFrame {
            step: config.quant_step,
            coeffs: quantize_frame(c, config.quant_step),
        })
        .collect();
    Ok(CodedStream {
        config: *config,
        frames,
        sample_rate: clip.sample_rate(),
        num_samples: clip.len(),
        source: Some(source),
    })
}

pub fn decode_clip(stream: &CodedStream) -> Result<AudioClip> {
    let mdct = Mdct::new(stream.config.frame_len)?;
    let frames: Vec<Vec<f64>> = stream.frames.iter().map(QuantizedFrame::dequantize).collect();
    let samples = mdct.synthesize(&frames, stream.num_samples)?;
    AudioClip::from_clamped(samples, stream.sample_rate)
}

impl QuantizedFrame {
    pub fn dequantize(&self) -> Vec<f64> {
        self.coeffs.iter().map(|&q| q as f64 * self.step).collect()
    }
}

impl CodedStream {
    pub fn coefficient_count(&self) -> usize {
        self.frames.len() * self.config.frame_len
    }

    /// Drops the retained unquantized coefficients.
    pub fn without_source(mut self) -> Self {
        self.source = None;
        self
    }

    /// Little-endian `SCS1` layout: magic, frame_len (u32), step (f64),
    /// frame count (u32), then per frame the step (f64) and `frame_len`
    /// i32 coefficients; a trailer holds sample rate (u32) and sample count
    /// (u64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.config.frame_len;
        let mut out = Vec::with_capacity(32 + self.frames.len() * (8 + 4 * n));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&self.config.quant_step.to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for frame in &self.frames {
            out.extend_from_slice(&frame.step.to_le_bytes());
            for q in &frame.coeffs {
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.num_samples as u64).to_le_bytes());
        out
    }

    /// Parses an `SCS1` buffer. The seed is not stored in the container and
    /// is taken from the caller.
    pub fn from_bytes(bytes: &[u8], seed: u64) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad magic, expected SCS1"));
        }
        let frame_len = r.u32()? as usize;
        let quant_step = r.f64()?;
        let config = CodecConfig {
            frame_len,
            quant_step,
            seed,
        };
        config.validate()?;
        let count = r.u32()? as usize;
        let mut frames = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let step = r.f64()?;
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::format(format!("invalid frame step {step}")));
            }
            let coeffs = r
                .take(4 * frame_len)?
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            frames.push(QuantizedFrame { step, coeffs });
        }
        let sample_rate = r.u32()?;
        let num_samples = r.u64()? as usize;
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after SCS1 stream"));
        }
        if sample_rate == 0 || frames.len() < 2 || num_samples + frame_len > (count + 1) * frame_len
        {
            return Err(Error::format("inconsistent SCS1 trailer"));
        }
        Ok(Self {
            config,
            frames,
            sample_rate,
            num_samples,
            source: None,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, seed)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("truncated stream"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
