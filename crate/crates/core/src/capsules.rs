//! Capsule layers: squash, primary capsules, and class capsules with
//! routing-by-agreement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Param, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{xavier_limit, Conv2d, Layer};

pub const DEFAULT_ROUTING_ITERATIONS: usize = 3;

/// Activity vectors of one sample's capsules with their cached lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleSet<T> {
    activities: Tensor<T>,
    lengths: Tensor<T>,
}

impl<T: Real> CapsuleSet<T> {
    /// `activities` is `[num_capsules, dim]`.
    pub fn from_activities(activities: Tensor<T>) -> Result<Self> {
        if activities.ndim() != 2 {
            return Err(Error::shape("capsule_set", format!("expected [n, dim], got {:?}", activities.shape())));
        }
        let dim = activities.shape()[1];
        let lengths = activities
            .data()
            .chunks(dim)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        Ok(CapsuleSet {
            lengths: Tensor::vector(lengths),
            activities,
        })
    }

    pub fn activities(&self) -> &Tensor<T> {
        &self.activities
    }

    pub fn lengths(&self) -> &Tensor<T> {
        &self.lengths
    }

    pub fn num_capsules(&self) -> usize {
        self.activities.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.activities.shape()[1]
    }

    pub fn activity(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.activities.data()[i * d..(i + 1) * d]
    }
}

/// Squash of a single vector: same direction, norm `‖s‖² / (1 + ‖s‖²)`.
pub fn squash<T: Real>(s: &[T]) -> Vec<T> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(s.to_vec()));
    let y = tape.squash(x).expect("squash of a finite vector is finite");
    tape.value(y).data().to_vec()
}

/// Index of the longest capsule; ties go to the lowest index.
pub fn predict_from_lengths<T: Real>(lengths: &[T]) -> usize {
    let mut best = 0;
    for (k, &l) in lengths.iter().enumerate().skip(1) {
        if l > lengths[best] {
            best = k;
        }
    }
    best
}

pub fn predict<T: Real>(class_caps: &CapsuleSet<T>) -> usize {
    predict_from_lengths(class_caps.lengths().data())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingOptions {
    pub iterations: usize,
    /// Treat the agreement `û·v` in the logit update as a constant, so
    /// gradient only flows through the final iteration's weighted sum.
    pub detach_agreement: bool,
}

impl Default for RoutingOptions {
    fn default() -> Self {
        RoutingOptions {
            iterations: DEFAULT_ROUTING_ITERATIONS,
            detach_agreement: true,
        }
    }
}

/// Routing logits and the coupling coefficients used at every iteration.
#[derive(Debug, Clone)]
pub struct RoutingState<T> {
    /// `[N, I, J]` logits after the last update.
    pub logits: Tensor<T>,
    /// One `[N, I, J]` coupling tensor per iteration.
    pub couplings: Vec<Tensor<T>>,
    pub iterations: usize,
}

/// Routing-by-agreement from `u [N, I, Din]` to `J` output capsules through
/// `w [I, J, Dout, Din]`. Returns `v [N, J, Dout]`.
pub fn route_batch<T: Real>(tape: &mut Tape<T>, u: Var, w: Var, opts: RoutingOptions) -> Result<(Var, RoutingState<T>)> {
    if opts.iterations == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let uhat = tape.caps_predict(u, w)?;
    let us = tape.shape(uhat).to_vec();
    let logit_shape = [us[0], us[1], us[2]];
    let mut couplings = Vec::with_capacity(opts.iterations);

    if opts.detach_agreement {
        let mut scratch = Tape::<T>::new();
        let uhat_c = scratch.constant(tape.value(uhat).clone());
        let mut logits = Tensor::zeros(&logit_shape);
        for _ in 0..opts.iterations - 1 {
            let b = scratch.constant(logits.clone());
            let c = scratch.softmax(b, 2)?;
            couplings.push(scratch.value(c).clone());
            let s = scratch.routing_combine(c, uhat_c)?;
            let v = scratch.squash(s)?;
            let a = scratch.agreement(uhat_c, v)?;
            let updated = scratch.add(b, a)?;
            logits = scratch.value(updated).clone();
        }
        let b = tape.constant(logits.clone());
        let c = tape.softmax(b, 2)?;
        couplings.push(tape.value(c).clone());
        let s = tape.routing_combine(c, uhat)?;
        let v = tape.squash(s)?;
        return Ok((
            v,
            RoutingState {
                logits,
                couplings,
                iterations: opts.iterations,
            },
        ));
    }

    let mut b = tape.constant(Tensor::zeros(&logit_shape));
    let mut v = None;
    for it in 0..opts.iterations {
        let c = tape.softmax(b, 2)?;
        couplings.push(tape.value(c).clone());
        let s = tape.routing_combine(c, uhat)?;
        let out = tape.squash(s)?;
        v = Some(out);
        if it + 1 < opts.iterations {
            let a = tape.agreement(uhat, out)?;
            b = tape.add(b, a)?;
        }
    }
    Ok((
        v.expect("at least one iteration"),
        RoutingState {
            logits: tape.value(b).clone(),
            couplings,
            iterations: opts.iterations,
        },
    ))
}

/// Single-sample routing on plain tensors.
pub fn route<T: Real>(in_caps: &CapsuleSet<T>, w: &Tensor<T>, opts: RoutingOptions) -> Result<(CapsuleSet<T>, RoutingState<T>)> {
    let mut tape = Tape::new();
    let u = in_caps
        .activities()
        .clone()
        .reshaped(&[1, in_caps.num_capsules(), in_caps.dim()])?;
    let u = tape.constant(u);
    let w = tape.constant(w.clone());
    let (v, state) = route_batch(&mut tape, u, w, opts)?;
    let vs = tape.shape(v).to_vec();
    let out = tape.value(v).clone().reshaped(&[vs[1], vs[2]])?;
    Ok((CapsuleSet::from_activities(out)?, state))
}

/// Regroups a `[N, ch, h, w]` feature map into `[N, (ch/dim)·h·w, dim]`
/// capsules (channel `t·dim + d` is component `d` of capsule type `t`)
/// and squashes each.
pub fn primary_capsules<T: Real>(tape: &mut Tape<T>, features: Var, caps_dim: usize) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("primary_capsules", format!("expected [N, ch, h, w], got {s:?}")));
    }
    if caps_dim == 0 || s[1] % caps_dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} channels are not divisible by capsule dimension {caps_dim}",
            s[1]
        )));
    }
    let (n, types, h, w) = (s[0], s[1] / caps_dim, s[2], s[3]);
    let x = tape.reshape(features, &[n, types, caps_dim, h, w])?;
    let x = tape.permute(x, &[0, 1, 3, 4, 2])?;
    let x = tape.reshape(x, &[n, types * h * w, caps_dim])?;
    tape.squash(x)
}

/// Convolution followed by capsule regrouping and squash.
#[derive(Debug, Clone)]
pub struct PrimaryCapsLayer<T> {
    pub conv: Conv2d<T>,
    pub caps_dim: usize,
}

impl<T: Real> PrimaryCapsLayer<T> {
    pub fn new(name: &str, in_channels: usize, capsule_types: usize, caps_dim: usize, kernel: usize, stride: usize) -> Self {
        PrimaryCapsLayer {
            conv: Conv2d::new(&format!("{name}.conv"), in_channels, capsule_types * caps_dim, kernel, stride, 0),
            caps_dim,
        }
    }

    /// Number of capsules produced from an `h × w` input.
    pub fn num_capsules(&self, h: usize, w: usize) -> Option<usize> {
        let types = self.conv.out_channels() / self.caps_dim;
        Some(types * self.conv.output_size(h)? * self.conv.output_size(w)?)
    }

    pub fn forward(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        let x = self.conv.forward(tape, features)?;
        primary_capsules(tape, x, self.caps_dim)
    }
}

impl<T: Real> Layer<T> for PrimaryCapsLayer<T> {
    fn init_parameters(&mut self, seed: u64) {
        self.conv.init_parameters(seed);
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.conv.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.conv.params_mut()
    }
}

/// Fully connected capsule layer with one transform per (input, output)
/// capsule pair.
#[derive(Debug, Clone)]
pub struct ClassCapsLayer<T> {
    /// `[in_caps, out_caps, out_dim, in_dim]`.
    pub weight: Param<T>,
    pub routing: RoutingOptions,
}

impl<T: Real> ClassCapsLayer<T> {
    pub fn new(name: &str, in_caps: usize, in_dim: usize, out_caps: usize, out_dim: usize, routing: RoutingOptions) -> Self {
        ClassCapsLayer {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[in_caps, out_caps, out_dim, in_dim])),
            routing,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, u: Var) -> Result<(Var, RoutingState<T>)> {
        let w = tape.bind(&self.weight);
        route_batch(tape, u, w, self.routing)
    }
}

impl<T: Real> Layer<T> for ClassCapsLayer<T> {
    /// Every output capsule sums over all input capsules, so the fan-in is
    /// `in_caps · in_dim`.
    fn init_parameters(&mut self, seed: u64) {
        let s = self.weight.value.shape().to_vec();
        let limit = xavier_limit(s[0] * s[3], s[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.weight.value.data_mut() {
            *v = T::from_f64(rng.random_range(-limit..limit));
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight]
    }
}
