//! Residual network: tensors, kernels, layers, training, checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod ops;
pub mod resnet;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{BatchNorm, Conv2d, Linear, Mode, Param};
pub use resnet::{classify, decide, Forward, Loss, NetConfig, ResidualUnit, SResNet, Verdict, COVER, STEGO};
pub use scalar::Scalar;
pub use tensor::Tensor4;
pub use train::{train, EpochRecord, PairedDataset, TrainConfig};
