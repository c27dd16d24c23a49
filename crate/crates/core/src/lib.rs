//! Spectrogram-based audio steganalysis: a toy perceptual codec with four
//! parameter-domain embedders, log spectrograms, fixed residual filters, a
//! residual network per window size, and a fused maximum-margin classifier.

pub mod audio;
pub mod codec;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod spectrogram;
pub mod spm;
pub mod synth;

pub use audio::{read_wav, segment, write_wav, AudioClip};
pub use codec::{CodecConfig, CodedStream, Scheme, StegoJob};
pub use error::{Error, ErrorCategory, Result};
pub use fusion::{fuse, metrics, svm_train, FusedFeature, Label, MarginModel, Metrics};
pub use nn::{NetConfig, SResNet, Tensor4};
pub use spectrogram::{spectrogram, SpectrogramMatrix};
pub use spm::FilterBank;
