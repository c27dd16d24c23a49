//! Seeded synthetic source material: harmonic tones with slow vibrato and
//! tremolo over a coloured noise floor. Used to build desk-scale corpora
//! when no recorded music is at hand.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub sample_rate: u32,
    pub duration_secs: f64,
    /// Peak amplitude range of the finished clip.
    pub peak: (f64, f64),
    /// Noise floor level relative to the peak.
    pub noise_level: (f64, f64),
    pub max_tones: usize,
    pub max_harmonics: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            duration_secs: 2.0,
            peak: (0.2, 0.6),
            noise_level: (0.0002, 0.002),
            max_tones: 3,
            max_harmonics: 6,
        }
    }
}

pub fn synth_clip(params: &SynthParams, seed: u64) -> Result<AudioClip> {
    let rate = params.sample_rate as f64;
    let len = (params.duration_secs * rate).floor() as usize;
    if len == 0 || params.max_tones == 0 || params.max_harmonics == 0 {
        return Err(Error::input("synthesis parameters produce an empty clip"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nyquist = rate / 2.0;
    let mut out = vec![0.0; len];

    let tones = rng.random_range(1..=params.max_tones);
    for tone in 0..tones {
        let f0 = 110.0 * 2f64.powf(rng.random_range(0.0..4.0));
        let harmonics = rng.random_range(1..=params.max_harmonics);
        let rolloff = rng.random_range(0.8..2.0);
        let level = rng.random_range(0.3..1.0);
        let vib_rate = rng.random_range(3.0..6.0);
        let vib_depth = rng.random_range(0.0..0.01);
        let trem_rate = rng.random_range(0.2..2.0);
        let trem_phase = rng.random_range(0.0..TAU);
        let onset = rng.random_range(0.0..0.5) * len as f64;
        // the first tone sounds from the start so no frame is silent
        let onset = if tone == 0 { 0.0 } else { onset };
        let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..TAU)).collect();
        for (t, sample) in out.iter_mut().enumerate() {
            let time = t as f64 / rate;
            let freq = f0 * (1.0 + vib_depth * (TAU * vib_rate * time).sin());
            let env = 0.6 + 0.4 * (TAU * trem_rate * time + trem_phase).sin();
            let attack = ((t as f64 - onset) / (0.02 * rate)).clamp(0.0, 1.0);
            let mut v = 0.0;
            for (h, phase) in phases.iter_mut().enumerate() {
                let fh = freq * (h + 1) as f64;
                if fh >= nyquist {
                    break;
                }
                *phase += TAU * fh / rate;
                v += phase.sin() / ((h + 1) as f64).powf(rolloff);
            }
            *sample += level * env * attack * v;
        }
    }

    let noise_gain = rng.random_range(params.noise_level.0..params.noise_level.1);
    let pole = rng.random_range(0.3..0.95);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut state = 0.0;
    let mut noise: Vec<f64> = (0..len)
        .map(|_| {
            state = pole * state + (1.0 - pole) * normal.sample(&mut rng);
            state
        })
        .collect();
    let noise_rms = (noise.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    let tonal_peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for v in &mut noise {
        *v *= noise_gain * tonal_peak / noise_rms.max(1e-12);
    }
    out.iter_mut().zip(&noise).for_each(|(o, n)| *o += n);

    let peak = rng.random_range(params.peak.0..params.peak.1);
    let current = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    out.iter_mut().for_each(|v| *v *= peak / current);
    AudioClip::new(out, params.sample_rate)
}
