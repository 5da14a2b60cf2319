//! Finite-difference gradient suite over every differentiable op, the
//! losses and a tiny end-to-end model, all in `f64`.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::capsules::{primary_capsules, route_batch, RoutingOptions};
use crate::error::Result;
use crate::losses::{
    combine_losses, hr_anchor_loss_batch, margin_loss_batch, targeted_reconstruction_loss_batch, AnchorBank, AnchorMode,
    LossTerms, LossWeights, MarginParams, Reduction, Resolution,
};
use crate::model::{Decode, Model, ModelConfig};
use crate::nn::Mode;

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TRIALS: usize = 20;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub tol: f64,
    pub eps: f64,
    pub trials: usize,
    pub seed: u64,
    /// Adds a case whose backward rule is deliberately wrong.
    pub inject_bug: bool,
    /// Only run cases whose name contains this string.
    pub filter: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            tol: DEFAULT_TOL,
            eps: DEFAULT_EPS,
            trials: DEFAULT_TRIALS,
            seed: 0,
            inject_bug: false,
            filter: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub trials: usize,
    pub worst_error: f64,
    pub worst_trial: usize,
    /// Set when a trial could not be evaluated at all.
    pub error: Option<String>,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One random instance: input tensors and a function of them. The gradient
/// is checked with respect to each input in `wrt` in turn, the others held
/// constant.
struct Instance {
    inputs: Vec<Tensor<f64>>,
    wrt: Vec<usize>,
    build: Build,
}

type Generator = fn(&mut ChaCha8Rng) -> Instance;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, 0.05, 1.5);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn dims(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=max)).collect()
}

/// Reduces an output to a scalar through fixed random weights so every
/// output coordinate carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn inst(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Instance {
    let wrt = (0..inputs.len()).collect();
    Instance {
        inputs,
        wrt,
        build: Box::new(build),
    }
}

fn unary(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var) -> Result<Var>, away: bool) -> Instance {
    let shape = dims(rng, 2, 4);
    let x = if away {
        rand_away_from_zero(rng, &shape)
    } else {
        rand_tensor(rng, &shape, -2.0, 2.0)
    };
    let s = rng.random();
    inst(vec![x], move |t, v| {
        let y = op(t, v[0])?;
        weighted_sum(t, y, s)
    })
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Instance {
    let shape = dims(rng, 3, 3);
    let a = rand_tensor(rng, &shape, -2.0, 2.0);
    let b = rand_tensor(rng, &shape, -2.0, 2.0);
    let s = rng.random();
    inst(vec![a, b], move |t, v| {
        let y = op(t, v[0], v[1])?;
        weighted_sum(t, y, s)
    })
}

fn g_add(rng: &mut ChaCha8Rng) -> Instance {
    binary(rng, |t, a, b| t.add(a, b))
}
fn g_sub(rng: &mut ChaCha8Rng) -> Instance {
    binary(rng, |t, a, b| t.sub(a, b))
}
fn g_mul(rng: &mut ChaCha8Rng) -> Instance {
    binary(rng, |t, a, b| t.mul(a, b))
}
fn g_scale(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| t.scale(x, -1.7), false)
}
fn g_add_scalar(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| t.add_scalar(x, 0.3), false)
}
fn g_relu(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| t.relu(x), true)
}
fn g_max0(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| t.max0(x), true)
}
fn g_sigmoid(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| t.sigmoid(x), false)
}
fn g_square(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| t.square(x), false)
}
fn g_sum(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| {
        let y = t.square(x)?;
        t.sum(y)
    }, false)
}
fn g_mean(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| {
        let y = t.square(x)?;
        t.mean(y)
    }, false)
}

fn g_matmul(rng: &mut ChaCha8Rng) -> Instance {
    let d = dims(rng, 3, 4);
    let a = rand_tensor(rng, &[d[0], d[1]], -1.0, 1.0);
    let b = rand_tensor(rng, &[d[1], d[2]], -1.0, 1.0);
    let s = rng.random();
    inst(vec![a, b], move |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, s)
    })
}

fn g_add_row_vector(rng: &mut ChaCha8Rng) -> Instance {
    let d = dims(rng, 2, 4);
    let x = rand_tensor(rng, &d, -1.0, 1.0);
    let b = rand_tensor(rng, &[d[1]], -1.0, 1.0);
    let s = rng.random();
    inst(vec![x, b], move |t, v| {
        let y = t.add_row_vector(v[0], v[1])?;
        weighted_sum(t, y, s)
    })
}

fn g_conv2d(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let h = rng.random_range(k..=k + 3);
    let w = rng.random_range(k..=k + 3);
    let x = rand_tensor(rng, &[n, cin, h, w], -1.0, 1.0);
    let wt = rand_tensor(rng, &[cout, cin, k, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[cout], -1.0, 1.0);
    let s = rng.random();
    inst(vec![x, wt, b], move |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
        weighted_sum(t, y, s)
    })
}

fn g_reduce_axis(rng: &mut ChaCha8Rng) -> Instance {
    let d = dims(rng, 3, 3);
    let axis = rng.random_range(0..3);
    let mean = rng.random::<bool>();
    let x = rand_tensor(rng, &d, -1.0, 1.0);
    let s = rng.random();
    inst(vec![x], move |t, v| {
        let y = if mean { t.mean_axis(v[0], axis)? } else { t.sum_axis(v[0], axis)? };
        weighted_sum(t, y, s)
    })
}

fn g_sq_l2_norm(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| t.sq_l2_norm(x), false)
}

fn g_l2_norm(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, |t, x| t.l2_norm(x), true)
}

fn g_softmax(rng: &mut ChaCha8Rng) -> Instance {
    let d = dims(rng, 3, 3);
    let axis = rng.random_range(0..3);
    let x = rand_tensor(rng, &d, -2.0, 2.0);
    let s = rng.random();
    inst(vec![x], move |t, v| {
        let y = t.softmax(v[0], axis)?;
        weighted_sum(t, y, s)
    })
}

fn g_shape_ops(rng: &mut ChaCha8Rng) -> Instance {
    let d = dims(rng, 3, 3);
    let x = rand_tensor(rng, &d, -1.0, 1.0);
    let axis = rng.random_range(0..3);
    let start = rng.random_range(0..d[axis]);
    let len = rng.random_range(1..=d[axis] - start);
    let s = rng.random();
    inst(vec![x], move |t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let r = t.reshape(p, &[d[2] * d[0], d[1]])?;
        let r = t.reshape(r, &[d[2], d[0], d[1]])?;
        let back = t.permute(r, &[1, 2, 0])?;
        let sl = t.slice(back, axis, start, len)?;
        let a = weighted_sum(t, sl, s)?;
        let b = weighted_sum(t, back, s ^ 1)?;
        t.add(a, b)
    })
}

fn g_concat(rng: &mut ChaCha8Rng) -> Instance {
    let d = dims(rng, 2, 3);
    let axis = rng.random_range(0..2);
    let mut other = d.clone();
    other[axis] = rng.random_range(1..=3);
    let a = rand_tensor(rng, &d, -1.0, 1.0);
    let b = rand_tensor(rng, &other, -1.0, 1.0);
    let s = rng.random();
    inst(vec![a, b], move |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]], axis)?;
        weighted_sum(t, y, s)
    })
}

fn g_gather_rows(rng: &mut ChaCha8Rng) -> Instance {
    let rows = rng.random_range(1..=4);
    let cols = rng.random_range(1..=3);
    let idx: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..rows)).collect();
    let x = rand_tensor(rng, &[rows, cols], -1.0, 1.0);
    let s = rng.random();
    inst(vec![x], move |t, v| {
        let y = t.gather_rows(v[0], &idx)?;
        weighted_sum(t, y, s)
    })
}

fn bn_inputs(rng: &mut ChaCha8Rng) -> (Vec<usize>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let n = rng.random_range(2..=3);
    let c = rng.random_range(1..=3);
    let sp = rng.random_range(1..=3);
    let shape = vec![n, c, sp, sp];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    let g = rand_tensor(rng, &[c], 0.5, 1.5);
    let b = rand_tensor(rng, &[c], -0.5, 0.5);
    (shape, x, g, b)
}

fn g_batch_norm_train(rng: &mut ChaCha8Rng) -> Instance {
    let (_, x, g, b) = bn_inputs(rng);
    let s = rng.random();
    inst(vec![x, g, b], move |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, s)
    })
}

fn g_batch_norm_eval(rng: &mut ChaCha8Rng) -> Instance {
    let (shape, x, g, b) = bn_inputs(rng);
    let c = shape[1];
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    let s = rng.random();
    inst(vec![x, g, b], move |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        weighted_sum(t, y, s)
    })
}

fn g_squash(rng: &mut ChaCha8Rng) -> Instance {
    let d = dims(rng, 2, 4);
    let x = rand_tensor(rng, &d, -2.0, 2.0);
    let s = rng.random();
    inst(vec![x], move |t, v| {
        let y = t.squash(v[0])?;
        weighted_sum(t, y, s)
    })
}

fn caps_shapes(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    (
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    )
}

fn g_caps_predict(rng: &mut ChaCha8Rng) -> Instance {
    let (n, i, j, dout, din) = caps_shapes(rng);
    let u = rand_tensor(rng, &[n, i, din], -1.0, 1.0);
    let w = rand_tensor(rng, &[i, j, dout, din], -1.0, 1.0);
    let s = rng.random();
    inst(vec![u, w], move |t, v| {
        let y = t.caps_predict(v[0], v[1])?;
        weighted_sum(t, y, s)
    })
}

fn g_routing_combine(rng: &mut ChaCha8Rng) -> Instance {
    let (n, i, j, d, _) = caps_shapes(rng);
    let c = rand_tensor(rng, &[n, i, j], 0.0, 1.0);
    let uhat = rand_tensor(rng, &[n, i, j, d], -1.0, 1.0);
    let s = rng.random();
    inst(vec![c, uhat], move |t, v| {
        let y = t.routing_combine(v[0], v[1])?;
        weighted_sum(t, y, s)
    })
}

fn g_agreement(rng: &mut ChaCha8Rng) -> Instance {
    let (n, i, j, d, _) = caps_shapes(rng);
    let uhat = rand_tensor(rng, &[n, i, j, d], -1.0, 1.0);
    let vv = rand_tensor(rng, &[n, j, d], -1.0, 1.0);
    let s = rng.random();
    inst(vec![uhat, vv], move |t, v| {
        let y = t.agreement(v[0], v[1])?;
        weighted_sum(t, y, s)
    })
}

fn g_routing(rng: &mut ChaCha8Rng) -> Instance {
    let (n, i, j, dout, din) = caps_shapes(rng);
    let iterations = rng.random_range(1..=3);
    let u = rand_tensor(rng, &[n, i, din], -1.0, 1.0);
    let w = rand_tensor(rng, &[i, j, dout, din], -1.0, 1.0);
    let s = rng.random();
    inst(vec![u, w], move |t, v| {
        let opts = RoutingOptions {
            iterations,
            detach_agreement: false,
        };
        let (y, _) = route_batch(t, v[0], v[1], opts)?;
        weighted_sum(t, y, s)
    })
}

fn g_primary_capsules(rng: &mut ChaCha8Rng) -> Instance {
    let dim = rng.random_range(1..=3);
    let types = rng.random_range(1..=2);
    let (n, w) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let x = rand_tensor(rng, &[n, dim * types, 2, w], -1.0, 1.0);
    let s = rng.random();
    inst(vec![x], move |t, v| {
        let y = primary_capsules(t, v[0], dim)?;
        weighted_sum(t, y, s)
    })
}

/// Lengths in (0, 1) kept away from the margin kinks.
fn rand_lengths(rng: &mut ChaCha8Rng, n: usize, k: usize, p: &MarginParams) -> Tensor<f64> {
    let mut t = rand_tensor(rng, &[n, k], 0.0, 1.0);
    for v in t.data_mut() {
        while (*v - p.m_plus).abs() < 0.02 || (*v - p.m_minus).abs() < 0.02 {
            *v = rng.random_range(0.0..1.0);
        }
    }
    t
}

fn g_margin_loss(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k) = (rng.random_range(1..=3), rng.random_range(1..=5));
    let p = MarginParams::default();
    let l = rand_lengths(rng, n, k, &p);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    inst(vec![l], move |t, v| {
        let y = margin_loss_batch(t, v[0], &labels, &p)?;
        t.sum(y)
    })
}

fn anchor_setup(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Resolution>, Tensor<f64>, Tensor<f64>) {
    let (n, k, d) = (rng.random_range(1..=4), rng.random_range(2..=3), rng.random_range(1..=5));
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    let res = (0..n)
        .map(|_| if rng.random::<bool>() { Resolution::Hr } else { Resolution::Vlr })
        .collect();
    (labels, res, rand_tensor(rng, &[n, d], -1.0, 1.0), rand_tensor(rng, &[k, d], -1.0, 1.0))
}

/// Anchor bank holding the unperturbed anchors. The loss reads VLR targets
/// through a stop-gradient copy of the bank, so finite differences must only
/// perturb the live copy bound via [`Tape::bind_as`] for the two sides to
/// agree.
fn frozen_bank(anchors: &Tensor<f64>) -> AnchorBank<f64> {
    let s = anchors.shape();
    let mut bank = AnchorBank::new(s[0], s[1], AnchorMode::Gradient);
    bank.anchors.value = anchors.clone();
    bank
}

fn g_hr_anchor_loss(rng: &mut ChaCha8Rng) -> Instance {
    let (labels, res, f, anchors) = anchor_setup(rng);
    let bank = frozen_bank(&anchors);
    inst(vec![f, anchors], move |t, v| {
        t.bind_as(AnchorBank::<f64>::PARAM_NAME, v[1]);
        let y = hr_anchor_loss_batch(t, v[0], &labels, &res, &bank)?;
        t.sum(y)
    })
}

fn g_targeted_recon(rng: &mut ChaCha8Rng) -> Instance {
    let d = dims(rng, 2, 6);
    let r = rand_tensor(rng, &d, 0.0, 1.0);
    let h = rand_tensor(rng, &d, 0.0, 1.0);
    inst(vec![r, h], |t, v| {
        let y = targeted_reconstruction_loss_batch(t, v[0], v[1])?;
        t.sum(y)
    })
}

fn g_total_loss(rng: &mut ChaCha8Rng) -> Instance {
    let (labels, res, f, anchors) = anchor_setup(rng);
    let n = labels.len();
    let k = anchors.shape()[0];
    let p = MarginParams::default();
    let lengths = rand_lengths(rng, n, k, &p);
    let px = rng.random_range(1..=6);
    let recon = rand_tensor(rng, &[n, px], 0.0, 1.0);
    let hr = rand_tensor(rng, &[n, px], 0.0, 1.0);
    let weights = LossWeights {
        lambda1: rng.random_range(0.1..1.0),
        lambda2: rng.random_range(0.1..1.0),
    };
    let bank = frozen_bank(&anchors);
    inst(vec![lengths, f, anchors, recon, hr], move |t, v| {
        t.bind_as(AnchorBank::<f64>::PARAM_NAME, v[2]);
        let margin = margin_loss_batch(t, v[0], &labels, &p)?;
        let anchor = hr_anchor_loss_batch(t, v[1], &labels, &res, &bank)?;
        let recon = targeted_reconstruction_loss_batch(t, v[3], v[4])?;
        combine_losses(
            t,
            LossTerms {
                margin,
                anchor: Some(anchor),
                recon: Some(recon),
            },
            &weights,
            Reduction::Mean,
        )
    })
}

/// Tiny model configuration used by the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        conv_filters: vec![3],
        conv_kernel: 3,
        conv_stride: 1,
        conv_padding: 1,
        primary_types: 2,
        primary_kernel: 3,
        primary_stride: 2,
        caps_dim_primary: 4,
        caps_dim_class: 4,
        routing_iterations: 2,
        detach_agreement: false,
        recon_hidden: [5, 6],
        loss_weights: LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
        },
        batch_size: 2,
        ..ModelConfig::for_input(2, 1, 8, 8)
    }
}

/// Full objective of the tiny model on a two-sample batch (one HR, one
/// VLR), differentiated with respect to the input batch or one parameter.
fn g_end_to_end(rng: &mut ChaCha8Rng) -> Instance {
    let seed = rng.random();
    let model = Model::<f64>::build(tiny_model_config(), seed).expect("tiny config is valid");
    let mut model = model;
    // Non-trivial anchors, so the anchor term has curvature in every slot.
    for v in model.anchors.anchors.value.data_mut() {
        *v = rng.random_range(0.0..0.5);
    }
    let which = rng.random_range(0..4);
    let x = rand_tensor(rng, &[2, 1, 8, 8], 0.0, 1.0);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..2)).collect();
    let res = [Resolution::Hr, Resolution::Vlr];
    let targets = rand_tensor(rng, &[2, 64], 0.0, 1.0);
    let param_names = ["conv0.weight", "class_caps.weight", "decoder2.weight", AnchorBank::<f64>::PARAM_NAME];
    let name = param_names[which];
    let param = model
        .state()
        .into_iter()
        .find(|p| p.name == name)
        .expect("parameter exists")
        .value
        .clone();
    let model = RefCell::new(model);
    let weights = model.borrow().config.loss_weights;
    let margin_p = model.borrow().config.margin;
    Instance {
        inputs: vec![x, param],
        wrt: vec![0, 1],
        build: Box::new(move |t, v| {
            t.bind_as(name, v[1]);
            let mut m = model.borrow_mut();
            let out = m.forward_tape(t, v[0], Mode::Train, Decode::Classes(&labels))?;
            let margin = margin_loss_batch(t, out.lengths, &labels, &margin_p)?;
            let anchor = hr_anchor_loss_batch(t, out.features, &labels, &res, &m.anchors)?;
            let tv = t.constant(targets.clone());
            let recon = targeted_reconstruction_loss_batch(t, out.recon.expect("decoded"), tv)?;
            combine_losses(
                t,
                LossTerms {
                    margin,
                    anchor: Some(anchor),
                    recon: Some(recon),
                },
                &weights,
                Reduction::Mean,
            )
        }),
    }
}

/// `x²` whose backward claims `3x`.
fn g_injected_bug(rng: &mut ChaCha8Rng) -> Instance {
    let x = rand_tensor(rng, &[3], 0.5, 1.5);
    inst(vec![x], |t, v| {
        let bwd: crate::autodiff::CustomBackward<f64> =
            Arc::new(|x: &[f64], _y: &[f64], g: &[f64]| x.iter().zip(g).map(|(a, b)| 3.0 * a * b).collect());
        let y = t.custom_unary(v[0], |a| a * a, bwd)?;
        t.sum(y)
    })
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

fn cases() -> Vec<(&'static str, Generator)> {
    vec![
        ("op/add", g_add),
        ("op/sub", g_sub),
        ("op/mul", g_mul),
        ("op/scale", g_scale),
        ("op/add_scalar", g_add_scalar),
        ("op/relu", g_relu),
        ("op/max0", g_max0),
        ("op/sigmoid", g_sigmoid),
        ("op/square", g_square),
        ("op/sum", g_sum),
        ("op/mean", g_mean),
        ("op/matmul", g_matmul),
        ("op/add_row_vector", g_add_row_vector),
        ("op/conv2d", g_conv2d),
        ("op/reduce_axis", g_reduce_axis),
        ("op/sq_l2_norm", g_sq_l2_norm),
        ("op/l2_norm", g_l2_norm),
        ("op/softmax", g_softmax),
        ("op/reshape_permute_slice", g_shape_ops),
        ("op/concat", g_concat),
        ("op/gather_rows", g_gather_rows),
        ("op/batch_norm_train", g_batch_norm_train),
        ("op/batch_norm_eval", g_batch_norm_eval),
        ("op/squash", g_squash),
        ("op/caps_predict", g_caps_predict),
        ("op/routing_combine", g_routing_combine),
        ("op/agreement", g_agreement),
        ("capsules/routing", g_routing),
        ("capsules/primary", g_primary_capsules),
        ("loss/margin", g_margin_loss),
        ("loss/hr_anchor", g_hr_anchor_loss),
        ("loss/targeted_recon", g_targeted_recon),
        ("loss/total", g_total_loss),
        ("model/end_to_end", g_end_to_end),
    ]
}

fn run_case(name: &str, generator: Generator, opts: &SuiteOptions, index: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(opts.seed, &[index]));
    let mut result = CaseResult {
        name: name.to_string(),
        trials: opts.trials,
        worst_error: 0.0,
        worst_trial: 0,
        error: None,
        passed: true,
    };
    for trial in 0..opts.trials {
        let instance = generator(&mut rng);
        for &i in &instance.wrt {
            let others = instance.inputs.clone();
            let build = &instance.build;
            let f = |t: &mut Tape<f64>, x: Var| {
                let vars: Vec<Var> = others
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if j == i { x } else { t.constant(v.clone()) })
                    .collect();
                build(t, &vars)
            };
            match grad_check(f, &instance.inputs[i], opts.eps, opts.tol) {
                Ok(r) => {
                    if r.max_rel_error > result.worst_error {
                        result.worst_error = r.max_rel_error;
                        result.worst_trial = trial;
                    }
                    result.passed &= r.passed;
                }
                Err(e) => {
                    result.passed = false;
                    result.error.get_or_insert_with(|| format!("trial {trial}, input {i}: {e}"));
                }
            }
        }
    }
    result
}

/// Runs every case for `opts.trials` random instances.
pub fn run_suite(opts: &SuiteOptions) -> Vec<CaseResult> {
    let mut list = cases();
    if opts.inject_bug {
        list.push(("negative_control/injected_bug", g_injected_bug));
    }
    list.into_iter()
        .enumerate()
        .filter(|(_, (name, _))| opts.filter.as_deref().map_or(true, |f| name.contains(f)))
        .map(|(i, (name, g))| run_case(name, g, opts, i as u64))
        .collect()
}
