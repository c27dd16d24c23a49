//! Mini-batch training over cover/stego pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::resnet::{SResNet, COVER, STEGO};
use super::scalar::Scalar;
use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Cover/stego pairs per mini-batch; a batch holds twice as many samples.
    pub batch_pairs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop once an epoch's mean cross-entropy falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_pairs: 16,
            seed: 0,
            adam: AdamConfig::default(),
            target_loss: None,
        }
    }
}

/// Single-sample tensors and the `(cover, stego)` index pairs built from
/// them. A cover may appear in several pairs.
#[derive(Debug, Clone, Default)]
pub struct PairedDataset<T> {
    pub samples: Vec<Tensor4<T>>,
    pub pairs: Vec<(usize, usize)>,
}

impl<T: Scalar> PairedDataset<T> {
    pub fn push_sample(&mut self, t: Tensor4<T>) -> usize {
        self.samples.push(t);
        self.samples.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective (cross-entropy plus weight penalty) over the batches.
    pub loss: f64,
    /// Mean cross-entropy alone.
    pub data_loss: f64,
    /// Training-mode accuracy over the epoch's batches.
    pub accuracy: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// Trains in place. Pairs are shuffled once per epoch with a ChaCha stream
/// seeded from `config.seed`; each batch interleaves covers and their stego
/// twins. A trailing partial batch is kept. The learning rate decays after
/// every epoch.
pub fn train<T: Scalar>(
    net: &mut SResNet<T>,
    data: &PairedDataset<T>,
    config: &TrainConfig,
    adam: &mut AdamState<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if config.batch_pairs == 0 {
        return Err(Error::input("batch must hold at least one pair"));
    }
    if data.pairs.len() < config.batch_pairs {
        return Err(Error::input(format!(
            "{} cover/stego pairs is fewer than one batch of {}",
            data.pairs.len(),
            config.batch_pairs
        )));
    }
    net.set_weight_decay(adam.config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut data_sum) = (0.0, 0.0);
        let (mut correct, mut seen, mut batches) = (0usize, 0usize, 0usize);
        for (bi, chunk) in order.chunks(config.batch_pairs).enumerate() {
            let mut items = Vec::with_capacity(2 * chunk.len());
            let mut labels = Vec::with_capacity(2 * chunk.len());
            for &p in chunk {
                let (c, s) = data.pairs[p];
                items.push(&data.samples[c]);
                labels.push(COVER);
                items.push(&data.samples[s]);
                labels.push(STEGO);
            }
            let x = Tensor4::stack(&items)?;
            let (loss, out) = net.loss_and_grads(&x, &labels)?;
            if !loss.total().is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            adam.update(net);
            for (probs, &label) in out.stego_probability().iter().zip(&labels) {
                correct += usize::from((*probs >= 0.5) == (label == STEGO));
            }
            seen += labels.len();
            loss_sum += loss.total();
            data_sum += loss.data;
            batches += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            data_loss: data_sum / batches as f64,
            accuracy: correct as f64 / seen as f64,
            lr: adam.lr,
        };
        log::info!(
            "epoch {:>3}: loss {:.5} (xent {:.5}) acc {:.4} lr {:.3e}",
            record.epoch,
            record.loss,
            record.data_loss,
            record.accuracy,
            record.lr
        );
        adam.end_epoch();
        on_epoch(&record);
        history.push(record);
        if config.target_loss.is_some_and(|t| record.data_loss < t) {
            break;
        }
    }
    Ok(history)
}
