//! Stateful layers: parameters, gradients, and the activations each layer
//! keeps between its forward and backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, BnCache, Window};
use super::scalar::Scalar;
use super::tensor::Tensor4;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A trainable array with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Whether weight decay applies (conv and dense weights only).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>, decay: bool) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad, decay }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

fn he_normal<T: Scalar, R: Rng>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub window: Window,
    pub weight: Param<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Bias-free convolution with He-normal weights and "same" padding.
    pub fn new<R: Rng>(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            c_in,
            c_out,
            window: Window::same(kernel, stride),
            weight: Param::new(he_normal(c_out * fan_in, fan_in, rng), true),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let y = ops::conv2d_forward(x, &self.weight.value, self.c_out, self.window)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    /// Same as `forward` but takes ownership of the input to cache it.
    pub fn forward_owned(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let y = ops::conv2d_forward(&x, &self.weight.value, self.c_out, self.window)?;
        self.input = (mode == Mode::Train).then_some(x);
        Ok(y)
    }

    /// Inference without caching.
    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ops::conv2d_forward(x, &self.weight.value, self.c_out, self.window)
    }

    /// Returns the input gradient (when requested) together with the cached
    /// forward input, which callers reuse as a ReLU mask.
    pub fn backward(&mut self, dy: &Tensor4<T>, need_dx: bool) -> (Option<Tensor4<T>>, Tensor4<T>) {
        let x = self.input.take().expect("conv backward without a training forward");
        let dx = ops::conv2d_backward(&x, &self.weight.value, dy, self.window, &mut self.weight.grad, need_dx);
        (dx, x)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels], false),
            beta: Param::new(vec![T::zero(); channels], false),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64(Self::EPS),
            momentum: T::from_f64(Self::MOMENTUM),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Tensor4<T> {
        match mode {
            Mode::Train => {
                let (y, cache, mean, var) =
                    ops::batch_norm_train(x, &self.gamma.value, &self.beta.value, self.eps);
                let keep = self.momentum;
                let take = T::one() - keep;
                for (r, m) in self.running_mean.iter_mut().zip(&mean) {
                    *r = keep * *r + take * *m;
                }
                for (r, v) in self.running_var.iter_mut().zip(&var) {
                    *r = keep * *r + take * *v;
                }
                self.cache = Some(cache);
                y
            }
            Mode::Infer => {
                self.cache = None;
                self.apply(x)
            }
        }
    }

    /// Inference-mode normalization with the running statistics.
    pub fn apply(&self, x: &Tensor4<T>) -> Tensor4<T> {
        ops::batch_norm_infer(
            x,
            &self.gamma.value,
            &self.beta.value,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Tensor4<T> {
        let cache = self.cache.take().expect("batch norm backward without a training forward");
        ops::batch_norm_backward(dy, &cache, &self.gamma.value, &mut self.gamma.grad, &mut self.beta.grad)
    }
}

/// Fully connected layer on `batch x d_in` rows.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Vec<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            d_in,
            d_out,
            weight: Param::new(he_normal(d_in * d_out, d_in, rng), true),
            bias: Param::new(vec![T::zero(); d_out], false),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &[T], batch: usize, mode: Mode) -> Vec<T> {
        let y = ops::linear(x, batch, &self.weight.value, &self.bias.value);
        self.input = (mode == Mode::Train).then(|| x.to_vec());
        y
    }

    pub fn apply(&self, x: &[T], batch: usize) -> Vec<T> {
        ops::linear(x, batch, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, dy: &[T]) -> Vec<T> {
        let x = self.input.take().expect("linear backward without a training forward");
        let batch = x.len() / self.d_in;
        ops::linear_backward(
            &x,
            batch,
            &self.weight.value,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
        )
    }
}
