//! Parameterized layers: convolution, batch normalization, fully connected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// Glorot-uniform half-width `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_fill<T: Real>(t: &mut Tensor<T>, limit: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = T::from_f64(rng.random_range(-limit..limit));
    }
}

fn zero_fill<T: Real>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| *v = T::zero());
}

/// Anything holding trainable parameters.
pub trait Layer<T: Real> {
    /// Glorot-uniform weights, zero biases; deterministic in `seed`.
    fn init_parameters(&mut self, seed: u64);
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `floor((in + 2·pad − k) / stride) + 1`, or `None` if the kernel does
    /// not fit.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let k = self.weight.value.shape()[2];
        (input + 2 * self.padding)
            .checked_sub(k)
            .map(|v| v / self.stride + 1)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.bind(&self.weight);
        let b = tape.bind(&self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn init_parameters(&mut self, seed: u64) {
        let s = self.weight.value.shape().to_vec();
        let field = s[2] * s[3];
        let limit = xavier_limit(s[1] * field, s[0] * field);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_fill(&mut self.weight.value, limit, &mut rng);
        zero_fill(&mut self.bias.value);
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalization over axis 1. Running statistics follow
/// `running ← momentum·running + (1 − momentum)·batch`, with the unbiased
/// batch variance, and only change in train mode.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNorm<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::new(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::new(format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.bind(&self.gamma);
        let beta = tape.bind(&self.beta);
        match mode {
            Mode::Eval => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                self.epsilon,
            ),
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.epsilon)?;
                let keep = T::from_f64(self.momentum);
                let take = T::one() - keep;
                let unbias = if stats.count > 1 {
                    T::from_f64(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                for (r, &m) in self.running_mean.value.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + take * m;
                }
                for (r, &v) in self.running_var.value.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + take * v * unbias;
                }
                Ok(y)
            }
        }
    }

    /// Running statistics, which are state but not trained.
    pub fn buffers(&self) -> Vec<&Param<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

impl<T: Real> Layer<T> for BatchNorm<T> {
    fn init_parameters(&mut self, _seed: u64) {
        self.gamma.value.data_mut().iter_mut().for_each(|v| *v = T::one());
        zero_fill(&mut self.beta.value);
        zero_fill(&mut self.running_mean.value);
        self.running_var.value.data_mut().iter_mut().for_each(|v| *v = T::one());
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// `activation(W x + b)` applied row-wise to `x [N, in]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[outputs, inputs])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let inputs = self.weight.value.shape()[1];
        if s.len() != 2 || s[1] != inputs {
            return Err(Error::shape("dense", format!("input {s:?} for {inputs} features")));
        }
        let w = tape.bind(&self.weight);
        let b = tape.bind(&self.bias);
        let wt = tape.permute(w, &[1, 0])?;
        let z = tape.matmul(x, wt)?;
        let z = tape.add_row_vector(z, b)?;
        match self.activation {
            Activation::Relu => tape.relu(z),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::None => Ok(z),
        }
    }
}

impl<T: Real> Layer<T> for Dense<T> {
    fn init_parameters(&mut self, seed: u64) {
        let s = self.weight.value.shape().to_vec();
        let limit = xavier_limit(s[1], s[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_fill(&mut self.weight.value, limit, &mut rng);
        zero_fill(&mut self.bias.value);
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn xavier_limit_for_equal_fans() {
        assert_eq!(xavier_limit(3, 3), 1.0);
    }

    #[test]
    fn init_is_seeded() {
        let mut a = Dense::<f32>::new("d", 5, 4, Activation::None);
        let mut b = a.clone();
        a.init_parameters(11);
        b.init_parameters(11);
        assert_eq!(a.weight.value, b.weight.value);
        b.init_parameters(12);
        assert_ne!(a.weight.value, b.weight.value);
        let limit = xavier_limit(5, 4) as f32;
        assert!(a.weight.value.data().iter().all(|v| v.abs() <= limit));
        assert!(a.bias.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let mut conv = Conv2d::<f64>::new("c", 2, 2, 1, 1, 0);
        conv.weight.value = Tensor::from_f64(&[2, 2, 1, 1], &[1., 0., 0., 1.]).unwrap();
        let x = rand_tensor(&[3, 2, 4, 5], 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_output_size_formula() {
        let conv = Conv2d::<f32>::new("c", 1, 1, 5, 1, 2);
        assert_eq!(conv.output_size(32), Some(32));
        let conv = Conv2d::<f32>::new("c", 1, 1, 9, 2, 0);
        assert_eq!(conv.output_size(32), Some(12));
        assert_eq!(conv.output_size(4), None);
    }

    #[test]
    fn eval_batchnorm_with_unit_stats_is_identity() {
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        let x = rand_tensor(&[2, 3, 2, 2], 2);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = bn.forward(&mut tape, xv, Mode::Eval).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-5);
        assert_eq!(bn.running_mean.value.data(), &[0.0; 3]);
    }

    #[test]
    fn train_batchnorm_normalizes_and_updates_running_stats() {
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        let mut x = rand_tensor(&[16, 2, 3, 3], 3);
        x.data_mut().iter_mut().for_each(|v| *v = *v * 4.0 + 1.5);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, xv, Mode::Train).unwrap();
        let y = tape.value(y).data();
        for c in 0..2 {
            let vals: Vec<f64> = (0..16).flat_map(|n| y[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.data().iter().all(|&m| m != 0.0));
    }

    #[test]
    fn dense_identity() {
        let mut d = Dense::<f64>::new("d", 3, 3, Activation::None);
        d.weight.value = Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = rand_tensor(&[4, 3], 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = d.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn dense_gradients() {
        let mut d = Dense::<f64>::new("d", 4, 3, Activation::Sigmoid);
        d.init_parameters(5);
        let x = rand_tensor(&[2, 4], 6);
        let r = grad_check(
            |t, xv| {
                let y = d.forward(t, xv)?;
                let y = t.square(y)?;
                t.sum(y)
            },
            &x,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let w0 = d.weight.value.clone();
        let r = grad_check(
            |t, wv| {
                t.bind_as("d.weight", wv);
                let xv = t.constant(x.clone());
                let y = d.forward(t, xv)?;
                t.sum(y)
            },
            &w0,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn conv_and_batchnorm_gradients() {
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 1, 1);
        conv.init_parameters(7);
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        bn.gamma.value = Tensor::from_f64(&[3], &[0.7, 1.3, -0.4]).unwrap();
        bn.beta.value = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap();
        let x = rand_tensor(&[4, 2, 4, 4], 8);
        let proj = rand_tensor(&[4, 3, 4, 4], 9);
        for mode in [Mode::Train, Mode::Eval] {
            let r = grad_check(
                |t, xv| {
                    let mut bn = bn.clone();
                    let y = conv.forward(t, xv)?;
                    let y = bn.forward(t, y, mode)?;
                    let p = t.constant(proj.clone());
                    let y = t.mul(y, p)?;
                    t.sum(y)
                },
                &x,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "{mode:?}: {r:?}");
        }
    }
}
