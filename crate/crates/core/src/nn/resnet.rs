//! The residual steganalysis network.
//!
//! Layout: fixed SPM filtering (outside the trainable graph), an initial
//! 3x3 convolution to the first group width, three groups of pre-activation
//! residual units, a final BN-ReLU, global average pooling to the feature
//! vector, and a dense layer to two logits. The first unit of every group
//! after the first downsamples: its main branch starts with the 3x3/2
//! average pool and its shortcut is a 1x1/2 projection followed by BN.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Linear, Mode, Param};
use super::ops;
use super::scalar::Scalar;
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::spectrogram::SpectrogramMatrix;
use crate::spm::{self, FilterBank};

pub const CLASSES: usize = 2;
pub const COVER: usize = 0;
pub const STEGO: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub units_per_group: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: spm::FILTERS,
            channels: [10, 20, 40],
            units_per_group: 5,
        }
    }
}

impl NetConfig {
    /// Two units per group; the desk-scale configuration.
    pub fn reduced() -> Self {
        Self {
            units_per_group: 2,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) || self.units_per_group == 0 {
            return Err(Error::input(format!("invalid network config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Projection<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub struct ResidualUnit<T> {
    downsample: bool,
    bn1: BatchNorm<T>,
    conv1: Conv2d<T>,
    bn2: BatchNorm<T>,
    conv2: Conv2d<T>,
    projection: Option<Projection<T>>,
    input_shape: Option<[usize; 4]>,
}

impl<T: Scalar> ResidualUnit<T> {
    fn new<R: rand::Rng>(c_in: usize, c_out: usize, downsample: bool, rng: &mut R) -> Self {
        let projection = downsample.then(|| Projection {
            conv: Conv2d::new(c_in, c_out, 1, 2, rng),
            bn: BatchNorm::new(c_out),
        });
        Self {
            downsample,
            bn1: BatchNorm::new(c_in),
            conv1: Conv2d::new(c_in, c_out, 3, 1, rng),
            bn2: BatchNorm::new(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, rng),
            projection,
            input_shape: None,
        }
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        if x.channels() != self.conv1.c_in {
            return Err(Error::Shape(format!(
                "residual unit expects {} channels, got {}",
                self.conv1.c_in,
                x.channels()
            )));
        }
        self.input_shape = Some(x.shape());
        let pooled;
        let h = if self.downsample {
            pooled = ops::avg_pool_3x3_s2(x);
            &pooled
        } else {
            x
        };
        let a = ops::relu(&self.bn1.forward(h, mode));
        let c1 = self.conv1.forward_owned(a, mode)?;
        let a = ops::relu(&self.bn2.forward(&c1, mode));
        drop(c1);
        let mut out = self.conv2.forward_owned(a, mode)?;
        match self.projection.as_mut() {
            Some(p) => {
                let s = p.conv.forward(x, mode)?;
                out.add_assign(&p.bn.forward(&s, mode));
            }
            None => out.add_assign(x),
        }
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let pooled;
        let h = if self.downsample {
            pooled = ops::avg_pool_3x3_s2(x);
            &pooled
        } else {
            x
        };
        let a = ops::relu(&self.bn1.apply(h));
        let c1 = self.conv1.apply(&a)?;
        let a = ops::relu(&self.bn2.apply(&c1));
        let mut out = self.conv2.apply(&a)?;
        out.add_assign(&self.shortcut(x)?);
        Ok(out)
    }

    /// Inference-mode shortcut path: identity, or projection then BN.
    pub fn shortcut(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        match &self.projection {
            Some(p) => Ok(p.bn.apply(&p.conv.apply(x)?)),
            None => Ok(x.clone()),
        }
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Tensor4<T> {
        let input_shape = self.input_shape.take().expect("unit backward without forward");
        let (dr2, r2) = self.conv2.backward(dy, true);
        let da2 = ops::relu_backward(&r2, &dr2.expect("requested"));
        drop(r2);
        let dc1 = self.bn2.backward(&da2);
        let (dr1, r1) = self.conv1.backward(&dc1, true);
        let da1 = ops::relu_backward(&r1, &dr1.expect("requested"));
        drop(r1);
        let dh = self.bn1.backward(&da1);
        let mut dx = if self.downsample {
            ops::avg_pool_3x3_s2_backward(input_shape, &dh)
        } else {
            dh
        };
        match self.projection.as_mut() {
            Some(p) => {
                let ds = p.bn.backward(dy);
                let (dxs, _) = p.conv.backward(&ds, true);
                dx.add_assign(&dxs.expect("requested"));
            }
            None => dx.add_assign(dy),
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.bn1.gamma);
        f(&mut self.bn1.beta);
        f(&mut self.conv1.weight);
        f(&mut self.bn2.gamma);
        f(&mut self.bn2.beta);
        f(&mut self.conv2.weight);
        if let Some(p) = self.projection.as_mut() {
            f(&mut p.conv.weight);
            f(&mut p.bn.gamma);
            f(&mut p.bn.beta);
        }
    }

    pub fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
        if let Some(p) = self.projection.as_mut() {
            f(&mut p.bn);
        }
    }

    /// Zeroes both 3x3 convolutions so the unit reduces to its shortcut.
    pub fn zero_residual_branch(&mut self) {
        self.conv1.weight.value.iter_mut().for_each(|v| *v = T::zero());
        self.conv2.weight.value.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Output of a forward pass: `batch x 2` logits and `batch x feature_dim`
/// pooled features, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub batch: usize,
    pub logits: Vec<T>,
    pub features: Vec<T>,
}

impl<T: Scalar> Forward<T> {
    pub fn probabilities(&self) -> Vec<T> {
        ops::softmax(&self.logits, CLASSES)
    }

    /// Probability of the stego class for each sample.
    pub fn stego_probability(&self) -> Vec<f64> {
        self.probabilities()
            .chunks_exact(CLASSES)
            .map(|p| p[STEGO].as_f64())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SResNet<T> {
    config: NetConfig,
    spm: FilterBank,
    initial: Conv2d<T>,
    groups: Vec<Vec<ResidualUnit<T>>>,
    final_bn: BatchNorm<T>,
    fc: Linear<T>,
    final_act: Option<Tensor4<T>>,
    weight_decay: f64,
}

impl<T: Scalar> SResNet<T> {
    pub fn new(config: NetConfig, spm: FilterBank, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial = Conv2d::new(config.in_channels, config.channels[0], 3, 1, &mut rng);
        let mut groups = Vec::with_capacity(3);
        let mut c_in = config.channels[0];
        for (g, &c_out) in config.channels.iter().enumerate() {
            let units = (0..config.units_per_group)
                .map(|u| {
                    let downsample = g > 0 && u == 0;
                    ResidualUnit::new(if u == 0 { c_in } else { c_out }, c_out, downsample, &mut rng)
                })
                .collect();
            groups.push(units);
            c_in = c_out;
        }
        let feat = config.feature_dim();
        Ok(Self {
            config,
            spm,
            initial,
            groups,
            final_bn: BatchNorm::new(feat),
            fc: Linear::new(feat, CLASSES, &mut rng),
            final_act: None,
            weight_decay: 0.0,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn filter_bank(&self) -> &FilterBank {
        &self.spm
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    /// Coefficient of the `0.5 * ||W||^2` penalty on conv and dense weights.
    pub fn set_weight_decay(&mut self, decay: f64) {
        self.weight_decay = decay;
    }

    /// Initial convolution ahead of the residual groups.
    pub fn stem(&self) -> &Conv2d<T> {
        &self.initial
    }

    /// BN applied before the final ReLU and pooling.
    pub fn head_bn(&self) -> &BatchNorm<T> {
        &self.final_bn
    }

    pub fn groups(&self) -> &[Vec<ResidualUnit<T>>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [Vec<ResidualUnit<T>>] {
        &mut self.groups
    }

    /// Number of 3x3 convolutions inside residual units.
    pub fn residual_conv_count(&self) -> usize {
        self.groups.iter().map(|g| 2 * g.len()).sum()
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Every trainable parameter in declaration order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.initial.weight);
        for unit in self.groups.iter_mut().flatten() {
            unit.visit_params(f);
        }
        f(&mut self.final_bn.gamma);
        f(&mut self.final_bn.beta);
        f(&mut self.fc.weight);
        f(&mut self.fc.bias);
    }

    /// Every batch-norm layer in declaration order.
    pub fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        for unit in self.groups.iter_mut().flatten() {
            unit.visit_bn(f);
        }
        f(&mut self.final_bn);
    }

    /// Applies the fixed SPM bank to each spectrogram and stacks the results.
    pub fn prepare(&self, specs: &[&SpectrogramMatrix]) -> Result<Tensor4<T>> {
        let filtered = specs
            .iter()
            .map(|s| spm::apply_filter_bank(s, &self.spm).map(|t| t.cast::<T>()))
            .collect::<Result<Vec<_>>>()?;
        Tensor4::stack(&filtered.iter().collect::<Vec<_>>())
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Forward pass on SPM-filtered input. Training mode uses batch
    /// statistics, updates running statistics, and caches activations.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Forward<T>> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        self.check_input(x)?;
        let mut h = self.initial.forward(x, mode)?;
        for unit in self.groups.iter_mut().flatten() {
            h = unit.forward(&h, mode)?;
        }
        let act = ops::relu(&self.final_bn.forward(&h, mode));
        drop(h);
        let features = ops::global_avg_pool(&act);
        self.final_act = Some(act);
        let logits = self.fc.forward(&features, x.batch(), mode);
        Ok(Forward {
            batch: x.batch(),
            logits,
            features,
        })
    }

    /// Inference-mode forward pass; leaves the model untouched.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Forward<T>> {
        self.check_input(x)?;
        let mut h = self.initial.apply(x)?;
        for unit in self.groups.iter().flatten() {
            h = unit.infer(&h)?;
        }
        let act = ops::relu(&self.final_bn.apply(&h));
        let features = ops::global_avg_pool(&act);
        let logits = self.fc.apply(&features, x.batch());
        Ok(Forward {
            batch: x.batch(),
            logits,
            features,
        })
    }

    /// Forward on raw spectrograms, filtering them with the SPM bank first.
    pub fn infer_spectrograms(&self, specs: &[&SpectrogramMatrix]) -> Result<Forward<T>> {
        self.infer(&self.prepare(specs)?)
    }

    fn backward(&mut self, dlogits: &[T]) {
        let dfeat = self.fc.backward(dlogits);
        let act = self.final_act.take().expect("backward without forward");
        let dact = ops::global_avg_pool_backward(act.shape(), &dfeat);
        let dh = ops::relu_backward(&act, &dact);
        drop(act);
        let mut d = self.final_bn.backward(&dh);
        for unit in self.groups.iter_mut().flatten().rev() {
            d = unit.backward(&d);
        }
        let _ = self.initial.backward(&d, false);
    }

    fn decay_penalty(&mut self) -> f64 {
        if self.weight_decay == 0.0 {
            return 0.0;
        }
        let mut sq = 0.0;
        self.visit_params(&mut |p| {
            if p.decay {
                sq += p.value.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            }
        });
        0.5 * self.weight_decay * sq
    }

    /// Training-mode loss: mean cross-entropy plus the weight penalty.
    pub fn loss(&mut self, x: &Tensor4<T>, labels: &[usize]) -> Result<f64> {
        let out = self.forward(x, Mode::Train)?;
        self.final_act = None;
        let (ce, _) = ops::softmax_cross_entropy(&out.logits, labels, CLASSES);
        Ok(ce + self.decay_penalty())
    }

    /// Computes the training loss and leaves its gradient in every
    /// parameter's `grad`.
    pub fn loss_and_grads(&mut self, x: &Tensor4<T>, labels: &[usize]) -> Result<(Loss, Forward<T>)> {
        if labels.len() != x.batch() || labels.iter().any(|&l| l >= CLASSES) {
            return Err(Error::input("labels must match the batch and lie in {0, 1}"));
        }
        self.visit_params(&mut |p| p.zero_grad());
        let out = self.forward(x, Mode::Train)?;
        let (ce, dlogits) = ops::softmax_cross_entropy(&out.logits, labels, CLASSES);
        self.backward(&dlogits);
        let decay = T::from_f64(self.weight_decay);
        if self.weight_decay != 0.0 {
            self.visit_params(&mut |p| {
                if p.decay {
                    for (g, &v) in p.grad.iter_mut().zip(&p.value) {
                        *g = *g + decay * v;
                    }
                }
            });
        }
        let loss = Loss {
            data: ce,
            penalty: self.decay_penalty(),
        };
        Ok((loss, out))
    }
}

/// Mean cross-entropy and the weight-decay term, kept apart for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub data: f64,
    pub penalty: f64,
}

impl Loss {
    pub fn total(&self) -> f64 {
        self.data + self.penalty
    }
}

/// Cover/stego decision with its stego probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub stego: bool,
    pub probability: f64,
}

/// Stego iff the probability reaches the threshold.
pub fn decide(probability: f64, threshold: f64) -> Verdict {
    Verdict {
        stego: probability >= threshold,
        probability,
    }
}

pub fn classify<T: Scalar>(
    net: &SResNet<T>,
    spec: &SpectrogramMatrix,
    threshold: f64,
) -> Result<Verdict> {
    let out = net.infer_spectrograms(&[spec])?;
    Ok(decide(out.stego_probability()[0], threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn input(batch: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * 4 * h * w;
        Tensor4::from_vec([batch, 4, h, w], (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn parameter_counts() {
        let mut full = SResNet::<f32>::new(NetConfig::default(), FilterBank::fixed(), 0).unwrap();
        assert_eq!(full.param_count(), 182_982);
        assert_eq!(full.residual_conv_count(), 30);
        let mut small = SResNet::<f32>::new(NetConfig::reduced(), FilterBank::fixed(), 0).unwrap();
        assert_eq!(small.param_count(), 68_742);
        assert_eq!(small.residual_conv_count(), 12);
    }

    #[test]
    fn projections_only_where_downsampling() {
        let net = SResNet::<f64>::new(NetConfig::default(), FilterBank::fixed(), 0).unwrap();
        for (g, units) in net.groups().iter().enumerate() {
            for (u, unit) in units.iter().enumerate() {
                assert_eq!(unit.has_projection(), g > 0 && u == 0);
            }
        }
    }

    #[test]
    fn output_shapes() {
        let net = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), 1).unwrap();
        let out = net.infer(&input(3, 16, 11, 0)).unwrap();
        assert_eq!(out.features.len(), 3 * 40);
        assert_eq!(out.logits.len(), 3 * CLASSES);
        assert!(net.infer(&Tensor4::zeros([1, 3, 8, 8])).is_err());
    }

    #[test]
    fn zero_branches_leave_shortcut_cascade() {
        let mut net = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), 2).unwrap();
        net.groups_mut().iter_mut().flatten().for_each(|u| u.zero_residual_branch());
        let x = input(2, 12, 10, 1);
        let out = net.infer(&x).unwrap();
        let mut h = net.stem().apply(&x).unwrap();
        for unit in net.groups().iter().flatten() {
            h = unit.shortcut(&h).unwrap();
        }
        let expected = ops::global_avg_pool(&ops::relu(&net.head_bn().apply(&h)));
        assert_eq!(out.features, expected);
    }

    #[test]
    fn inference_is_batch_invariant() {
        let net = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), 3).unwrap();
        let x = input(5, 9, 14, 2);
        let all = net.infer(&x).unwrap();
        for i in 0..5 {
            let one = Tensor4::from_vec([1, 4, 9, 14], x.sample(i).to_vec()).unwrap();
            let single = net.infer(&one).unwrap();
            for (a, b) in single.features.iter().zip(&all.features[i * 40..(i + 1) * 40]) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), 9).unwrap();
        let mut b = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), 9).unwrap();
        let (mut va, mut vb) = (Vec::new(), Vec::new());
        a.visit_params(&mut |p| va.extend_from_slice(&p.value));
        b.visit_params(&mut |p| vb.extend_from_slice(&p.value));
        assert_eq!(va, vb);
    }

    #[test]
    fn threshold_tie_is_stego() {
        assert!(decide(0.5, 0.5).stego);
        assert!(!decide(0.4999, 0.5).stego);
    }
}
