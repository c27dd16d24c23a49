//! PCM audio ingestion and output.
//!
//! Everything downstream works on [`AudioClip`]: mono, real-valued samples in
//! `[-1, 1]` with an attached sample rate. Only 16-bit integer PCM in a
//! RIFF/WAVE container is read or written.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const PCM_FORMAT: u16 = 1;
const READ_SCALE: f64 = 1.0 / 32768.0;
const WRITE_SCALE: f64 = 32768.0;

/// Mono PCM samples normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::input("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::input("audio clip has no samples"));
        }
        if let Some(bad) = samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(Error::input(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a clip after clamping every sample into `[-1, 1]`.
    pub fn from_clamped(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE byte buffer holding 16-bit PCM.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(Error::format("truncated fmt chunk"));
                }
                let format = le_u16(bytes, body);
                let channels = le_u16(bytes, body + 2);
                let rate = le_u32(bytes, body + 4);
                let bits = le_u16(bytes, body + 14);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let (format, channels, rate, bits) =
                    fmt.ok_or_else(|| Error::format("data chunk precedes fmt chunk"))?;
                if format != PCM_FORMAT {
                    return Err(Error::format(format!(
                        "unsupported format code {format}, expected integer PCM"
                    )));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedBitDepth(bits));
                }
                if channels != 1 && channels != 2 {
                    return Err(Error::format(format!("unsupported channel count {channels}")));
                }
                if rate == 0 {
                    return Err(Error::format("sample rate is zero"));
                }
                let frame_bytes = 2 * channels as usize;
                if body + size > bytes.len() || size % frame_bytes != 0 {
                    return Err(Error::format("truncated data chunk"));
                }
                let data = &bytes[body..body + size];
                let samples: Vec<f64> = data
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f64 = frame
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 * READ_SCALE)
                            .sum();
                        sum / channels as f64
                    })
                    .collect();
                return AudioClip::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::format("no data chunk"))
}

/// Encodes a clip as mono 16-bit PCM WAV bytes.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        out.extend_from_slice(&pcm16(s).to_le_bytes());
    }
    out
}

/// Maps a normalized sample to its stored 16-bit integer, saturating at
/// `i16::MAX` so that `1.0` stores as 32767.
pub fn pcm16(sample: f64) -> i16 {
    (sample.clamp(-1.0, 1.0) * WRITE_SCALE)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}

/// Cuts a clip into consecutive, non-overlapping windows of
/// `floor(duration_secs * rate)` samples. The trailing remainder is dropped.
pub fn segment(clip: &AudioClip, duration_secs: f64) -> Result<Vec<AudioClip>> {
    let len = (duration_secs * clip.sample_rate as f64).floor();
    if !(len >= 1.0) {
        return Err(Error::input(format!(
            "segment duration {duration_secs}s is shorter than one sample"
        )));
    }
    let len = len as usize;
    Ok(clip
        .samples
        .chunks_exact(len)
        .map(|chunk| AudioClip {
            samples: chunk.to_vec(),
            sample_rate: clip.sample_rate,
        })
        .collect())
}
