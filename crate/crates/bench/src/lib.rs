//! Shared fixtures for the kernel benchmarks.

use steganalysis_core::nn::{NetConfig, SResNet, Tensor4};
use steganalysis_core::pipeline::window_input;
use steganalysis_core::synth::{synth_clip, SynthParams};
use steganalysis_core::{AudioClip, FilterBank};

/// Two-second synthetic clip at 16 kHz.
pub fn fixture_clip(seed: u64) -> AudioClip {
    synth_clip(&SynthParams::default(), seed).expect("default synthesis parameters are valid")
}

/// Reduced network and a batch of `batch` SPM inputs at window `n`.
pub fn fixture_net(n: usize, batch: usize) -> (SResNet<f32>, Tensor4<f32>) {
    let bank = FilterBank::fixed();
    let samples: Vec<Tensor4<f32>> = (0..batch as u64)
        .map(|s| window_input(&fixture_clip(s), n, &bank).expect("fixture clip fits the window"))
        .collect();
    let net = SResNet::new(NetConfig::reduced(), bank, 0).expect("reduced config is valid");
    (net, Tensor4::stack(&samples.iter().collect::<Vec<_>>()).expect("samples share a shape"))
}
