//! Parameter-domain embedders operating on quantized MDCT coefficients.
//!
//! Each scheme defines a set of eligible carriers in a [`CodedStream`]. The
//! carriers that receive message bits are the prefix of a seeded
//! permutation of the eligible set, so embedder and extractor agree on
//! positions as long as eligibility is unchanged by embedding, which every
//! scheme here guarantees.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stream::{quantize_frame, CodedStream};
use crate::error::{Error, Result};

/// Largest magnitude coded by the regular codebooks.
pub const ESCAPE_THRESHOLD: i32 = 16;
pub const DEFAULT_SIGN_THRESHOLD: u32 = 4;
/// Step-size perturbations tried by PARITY before giving up.
pub const PARITY_MAX_STEPS: usize = 50;
const PARITY_DELTA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    /// LSB of escape-coded magnitudes.
    #[serde(rename = "LSB_ESC")]
    LsbEsc,
    /// Parity of the small-value codebook index via its last coefficient.
    #[serde(rename = "MIN")]
    Min,
    /// Sign bits of small non-zero coefficients.
    #[serde(rename = "SIGN")]
    Sign,
    /// Parity of the per-frame coded length, steered by the quantizer step.
    #[serde(rename = "PARITY")]
    Parity,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::LsbEsc, Scheme::Min, Scheme::Sign, Scheme::Parity];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::LsbEsc => "LSB_ESC",
            Scheme::Min => "MIN",
            Scheme::Sign => "SIGN",
            Scheme::Parity => "PARITY",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Scheme::LsbEsc => 0x4c53_4245,
            Scheme::Min => 0x4d49_4e00,
            Scheme::Sign => 0x5349_474e,
            Scheme::Parity => 0x5041_5254,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LSB_ESC" | "LSB-EE" | "LSB_EE" => Ok(Scheme::LsbEsc),
            "MIN" => Ok(Scheme::Min),
            "SIGN" => Ok(Scheme::Sign),
            "PARITY" | "MP3STEGO" => Ok(Scheme::Parity),
            _ => Err(Error::input(format!("unknown scheme {s:?}"))),
        }
    }
}

/// Four small-value coefficients sharing one codebook index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizedGroup {
    pub q: [i8; 4],
}

impl QuantizedGroup {
    pub fn new(q: [i32; 4]) -> Option<Self> {
        if q.iter().all(|v| (-1..=1).contains(v)) {
            Some(Self {
                q: q.map(|v| v as i8),
            })
        } else {
            None
        }
    }

    /// `sum_i 3^i q[i] + 40`, in `0..=80`.
    pub fn index(&self) -> u8 {
        let mut idx = 40i32;
        let mut pow = 1;
        for &v in &self.q {
            idx += pow * v as i32;
            pow *= 3;
        }
        idx as u8
    }

    pub fn from_index(index: u8) -> Option<Self> {
        if index > 80 {
            return None;
        }
        // index = sum_i 3^i (q[i] + 1): plain base-3 digits
        let mut rest = index as i32;
        let mut q = [0i8; 4];
        for v in &mut q {
            *v = (rest % 3) as i8 - 1;
            rest /= 3;
        }
        Some(Self { q })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StegoJob {
    pub scheme: Scheme,
    pub ebr: f64,
    pub sign_threshold: u32,
    pub message: Vec<bool>,
}

/// `floor(ebr * capacity)`.
pub fn message_len(capacity: usize, ebr: f64) -> Result<usize> {
    if !(ebr > 0.0 && ebr <= 1.0) {
        return Err(Error::input(format!("embedding rate {ebr} outside (0, 1]")));
    }
    Ok((ebr * capacity as f64).floor() as usize)
}

impl StegoJob {
    /// A job carrying `floor(ebr * capacity)` pseudorandom bits.
    pub fn random(
        stream: &CodedStream,
        scheme: Scheme,
        ebr: f64,
        sign_threshold: u32,
        seed: u64,
    ) -> Result<Self> {
        let cap = capacity(stream, scheme, sign_threshold);
        let len = message_len(cap, ebr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7373_6167_6500);
        let message = (0..len).map(|_| rng.random::<bool>()).collect();
        Ok(Self {
            scheme,
            ebr,
            sign_threshold,
            message,
        })
    }

    pub fn with_message(scheme: Scheme, ebr: f64, message: Vec<bool>) -> Self {
        Self {
            scheme,
            ebr,
            sign_threshold: DEFAULT_SIGN_THRESHOLD,
            message,
        }
    }
}

/// Surrogate coded length of one coefficient: unary magnitude, terminator,
/// and a sign bit for non-zero values.
pub fn codeword_len(q: i32) -> u64 {
    1 + q.unsigned_abs() as u64 + u64::from(q != 0)
}

pub fn frame_cost(coeffs: &[i32]) -> u64 {
    coeffs.iter().map(|&q| codeword_len(q)).sum()
}

fn is_small(q: i32) -> bool {
    (-1..=1).contains(&q)
}

/// Eligible carriers in stream order. Coefficient schemes yield flat
/// coefficient indices, MIN yields the flat index of each group's first
/// coefficient and PARITY yields frame indices.
pub fn carriers(stream: &CodedStream, scheme: Scheme, sign_threshold: u32) -> Vec<usize> {
    let n = stream.config.frame_len;
    let flat = stream
        .frames
        .iter()
        .enumerate()
        .flat_map(move |(f, fr)| fr.coeffs.iter().enumerate().map(move |(i, &q)| (f * n + i, q)));
    match scheme {
        Scheme::LsbEsc => flat
            .filter(|&(_, q)| q.unsigned_abs() > ESCAPE_THRESHOLD as u32)
            .map(|(i, _)| i)
            .collect(),
        Scheme::Sign => flat
            .filter(|&(_, q)| q != 0 && q.unsigned_abs() <= sign_threshold)
            .map(|(i, _)| i)
            .collect(),
        Scheme::Min => stream
            .frames
            .iter()
            .enumerate()
            .flat_map(|(f, fr)| {
                fr.coeffs
                    .chunks_exact(4)
                    .enumerate()
                    .filter(|(_, g)| g.iter().all(|&q| is_small(q)))
                    .map(move |(g, _)| f * n + 4 * g)
            })
            .collect(),
        Scheme::Parity => (0..stream.frames.len()).collect(),
    }
}

pub fn capacity(stream: &CodedStream, scheme: Scheme, sign_threshold: u32) -> usize {
    carriers(stream, scheme, sign_threshold).len()
}

fn selection_rng(stream: &CodedStream, scheme: Scheme) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream.config.seed ^ scheme.tag())
}

/// The carriers that hold message bits, in message order.
fn selected(stream: &CodedStream, job: &StegoJob) -> Result<Vec<usize>> {
    let mut slots = carriers(stream, job.scheme, job.sign_threshold);
    if job.message.len() > slots.len() {
        return Err(Error::CapacityExceeded {
            message: job.message.len(),
            capacity: slots.len(),
        });
    }
    slots.shuffle(&mut selection_rng(stream, job.scheme));
    slots.truncate(job.message.len());
    Ok(slots)
}

pub fn embed(stream: &CodedStream, job: &StegoJob) -> Result<CodedStream> {
    if job.sign_threshold == 0 {
        return Err(Error::input("sign threshold must be positive"));
    }
    let slots = selected(stream, job)?;
    let mut out = stream.clone();
    let n = stream.config.frame_len;
    match job.scheme {
        Scheme::LsbEsc => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream.config.seed ^ 0x6469_7265_6374);
            for (&slot, &bit) in slots.iter().zip(&job.message) {
                let q = &mut out.frames[slot / n].coeffs[slot % n];
                let mag = q.unsigned_abs() as i32;
                if (mag & 1 == 1) != bit {
                    let step = if mag == ESCAPE_THRESHOLD + 1 || rng.random::<bool>() {
                        1
                    } else {
                        -1
                    };
                    *q = q.signum() * (mag + step);
                }
            }
        }
        Scheme::Min => {
            for (&slot, &bit) in slots.iter().zip(&job.message) {
                let coeffs = &mut out.frames[slot / n].coeffs[slot % n..slot % n + 4];
                let group = QuantizedGroup::new([coeffs[0], coeffs[1], coeffs[2], coeffs[3]])
                    .expect("MIN carrier outside the small-value region");
                if (group.index() & 1 == 1) != bit {
                    // changing q[3] by one moves the index by 27
                    coeffs[3] = match coeffs[3] {
                        0 => 1,
                        _ => 0,
                    };
                }
            }
        }
        Scheme::Sign => {
            for (&slot, &bit) in slots.iter().zip(&job.message) {
                let q = &mut out.frames[slot / n].coeffs[slot % n];
                *q = if bit { q.abs() } else { -q.abs() };
            }
        }
        Scheme::Parity => {
            for (&frame, &bit) in slots.iter().zip(&job.message) {
                embed_parity(&mut out, frame, bit)?;
            }
        }
    }
    Ok(out)
}

/// Re-quantizes one frame with perturbed steps `step * (1 + delta)` for
/// `delta` in `+0.01, -0.01, +0.02, ...` until the coded-length parity
/// matches `bit`.
fn embed_parity(stream: &mut CodedStream, frame: usize, bit: bool) -> Result<()> {
    if (frame_cost(&stream.frames[frame].coeffs) & 1 == 1) == bit {
        return Ok(());
    }
    let base = stream.config.quant_step;
    let values = match &stream.source {
        Some(source) => source[frame].clone(),
        None => stream.frames[frame].dequantize(),
    };
    for k in 1..=PARITY_MAX_STEPS {
        let magnitude = PARITY_DELTA * k.div_ceil(2) as f64;
        let delta = if k % 2 == 1 { magnitude } else { -magnitude };
        let step = base * (1.0 + delta);
        let coeffs = quantize_frame(&values, step);
        if (frame_cost(&coeffs) & 1 == 1) == bit {
            stream.frames[frame].step = step;
            stream.frames[frame].coeffs = coeffs;
            return Ok(());
        }
    }
    Err(Error::ParityUnreachable { frame })
}

/// Reads `job.message.len()` bits back out of a stego stream.
pub fn extract(stream: &CodedStream, job: &StegoJob) -> Result<Vec<bool>> {
    let slots = selected(stream, job).map_err(|e| match e {
        Error::CapacityExceeded { message, capacity } => Error::CapacityMismatch {
            message,
            expected: capacity,
        },
        other => other,
    })?;
    let n = stream.config.frame_len;
    let q = |slot: usize| stream.frames[slot / n].coeffs[slot % n];
    Ok(slots
        .into_iter()
        .map(|slot| match job.scheme {
            Scheme::LsbEsc => q(slot).unsigned_abs() & 1 == 1,
            Scheme::Min => {
                let c = &stream.frames[slot / n].coeffs[slot % n..slot % n + 4];
                QuantizedGroup::new([c[0], c[1], c[2], c[3]])
                    .map(|g| g.index() & 1 == 1)
                    .unwrap_or(false)
            }
            Scheme::Sign => q(slot) > 0,
            Scheme::Parity => frame_cost(&stream.frames[slot].coeffs) & 1 == 1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::stream::{CodecConfig, QuantizedFrame};

    fn stream_of(frames: Vec<Vec<i32>>) -> CodedStream {
        let config = CodecConfig {
            frame_len: frames[0].len(),
            quant_step: 0.005,
            seed: 11,
        };
        CodedStream {
            config,
            frames: frames
                .into_iter()
                .map(|coeffs| QuantizedFrame {
                    step: config.quant_step,
                    coeffs,
                })
                .collect(),
            sample_rate: 16000,
            num_samples: 32,
            source: None,
        }
    }

    #[test]
    fn group_index() {
        let g = QuantizedGroup::new([1, 0, -1, 0]).unwrap();
        assert_eq!(g.index(), 32);
        assert_eq!(QuantizedGroup::new([0; 4]).unwrap().index(), 40);
        assert!(QuantizedGroup::new([2, 0, 0, 0]).is_none());
        assert!(QuantizedGroup::from_index(81).is_none());
        for i in 0..=80 {
            assert_eq!(QuantizedGroup::from_index(i).unwrap().index(), i);
        }
    }

    #[test]
    fn sign_rule() {
        let s = stream_of(vec![vec![3; 32], vec![0; 32]]);
        let cap = capacity(&s, Scheme::Sign, 4);
        assert_eq!(cap, 32);
        let job = StegoJob::with_message(Scheme::Sign, 1.0, vec![false; 32]);
        let out = embed(&s, &job).unwrap();
        assert!(out.frames[0].coeffs.iter().all(|&q| q == -3));
        let job = StegoJob::with_message(Scheme::Sign, 1.0, vec![true; 32]);
        assert!(embed(&out, &job).unwrap().frames[0].coeffs.iter().all(|&q| q == 3));
    }

    #[test]
    fn sign_threshold_limits_carriers() {
        let s = stream_of(vec![vec![1, -4, 5, 0, 2, -7, 4, 3], vec![0; 8]]);
        assert_eq!(capacity(&s, Scheme::Sign, 4), 5);
        assert_eq!(capacity(&s, Scheme::Sign, 1), 1);
        let job = StegoJob::with_message(Scheme::Sign, 1.0, vec![true; 5]);
        let out = embed(&s, &job).unwrap();
        assert_eq!(out.frames[0].coeffs, vec![1, 4, 5, 0, 2, -7, 4, 3]);
    }

    #[test]
    fn zero_stream_capacities() {
        let s = stream_of(vec![vec![0; 512]]);
        assert_eq!(capacity(&s, Scheme::LsbEsc, 4), 0);
        assert_eq!(capacity(&s, Scheme::Sign, 4), 0);
        assert_eq!(capacity(&s, Scheme::Min, 4), 128);
        assert_eq!(capacity(&s, Scheme::Parity, 4), 1);
    }

    #[test]
    fn lsb_escape_keeps_eligibility() {
        for mag in 17..=64 {
            for sign in [-1, 1] {
                for bit in [false, true] {
                    let s = stream_of(vec![vec![sign * mag; 32], vec![0; 32]]);
                    let job = StegoJob::with_message(Scheme::LsbEsc, 1.0, vec![bit; 32]);
                    let out = embed(&s, &job).unwrap();
                    for (&a, &b) in s.frames[0].coeffs.iter().zip(&out.frames[0].coeffs) {
                        assert!(b.unsigned_abs() > 16, "{a} -> {b}");
                        assert_eq!(a.signum(), b.signum());
                        assert!((a - b).abs() <= 1);
                        assert_eq!(b.unsigned_abs() & 1 == 1, bit);
                    }
                }
            }
        }
        let s = stream_of(vec![vec![17; 4], vec![0; 4]]);
        let out = embed(&s, &StegoJob::with_message(Scheme::LsbEsc, 1.0, vec![false; 4])).unwrap();
        assert_eq!(out.frames[0].coeffs, vec![18; 4]);
    }

    #[test]
    fn min_modifies_last_coefficient_only() {
        let s = stream_of(vec![vec![1, 0, -1, 0, 1, 1, 1, 1, 2, 0, 0, 0, -1, -1, 0, -1], vec![0; 16]]);
        assert_eq!(capacity(&s, Scheme::Min, 4), 3 + 4);
        let cap = capacity(&s, Scheme::Min, 4);
        for bits in [vec![true; 7], vec![false; 7]] {
            let job = StegoJob::with_message(Scheme::Min, 1.0, bits.clone());
            let out = embed(&s, &job).unwrap();
            assert_eq!(capacity(&out, Scheme::Min, 4), cap);
            for (fa, fb) in s.frames.iter().zip(&out.frames) {
                for (ga, gb) in fa.coeffs.chunks(4).zip(fb.coeffs.chunks(4)) {
                    assert_eq!(ga[..3], gb[..3]);
                    assert!((ga[3] - gb[3]).abs() <= 1);
                    if let Some(g) = QuantizedGroup::new([gb[0], gb[1], gb[2], gb[3]]) {
                        assert_eq!(g.index() & 1 == 1, bits[0]);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_message() {
        let s = stream_of(vec![vec![3, 1, 0, 20], vec![0; 4]]);
        for scheme in Scheme::ALL {
            let job = StegoJob::with_message(scheme, 1.0, vec![]);
            assert_eq!(embed(&s, &job).unwrap(), s);
            assert!(extract(&s, &job).unwrap().is_empty());
        }
    }

    #[test]
    fn over_capacity() {
        let s = stream_of(vec![vec![3, 1, 0, 20], vec![0; 4]]);
        let job = StegoJob::with_message(Scheme::LsbEsc, 1.0, vec![true; 2]);
        assert!(matches!(embed(&s, &job), Err(Error::CapacityExceeded { .. })));
        assert!(matches!(extract(&s, &job), Err(Error::CapacityMismatch { .. })));
    }

    #[test]
    fn parity_unreachable_on_silent_frames() {
        let s = stream_of(vec![vec![0; 32], vec![0; 32]]);
        assert_eq!(frame_cost(&s.frames[0].coeffs) % 2, 0);
        let job = StegoJob::with_message(Scheme::Parity, 1.0, vec![true, true]);
        assert!(matches!(embed(&s, &job), Err(Error::ParityUnreachable { .. })));
    }

    #[test]
    fn ebr_bounds() {
        assert!(message_len(10, 0.0).is_err());
        assert!(message_len(10, 1.5).is_err());
        assert_eq!(message_len(10, 0.35).unwrap(), 3);
        assert_eq!(message_len(10, 1.0).unwrap(), 10);
    }

    #[test]
    fn scheme_names() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("LSB".parse::<Scheme>().is_err());
    }
}
