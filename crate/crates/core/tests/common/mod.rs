//! Independent oracles and measurement helpers shared by the integration
//! tests and the acceptance runner.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use directcaps::autodiff::{Tape, Tensor};
use directcaps::capsules::{route_batch, squash, RoutingOptions};
use directcaps::data::{
    augment, bicubic_resize, epoch_batches, make_vlr_pair, synth_images, AugmentConfig, AugmentOps, Image, Mix,
    PairedSet, Split, SynthConfig, View,
};
use directcaps::evaluation::{mcnemar, ContingencyTable, McNemar};
use directcaps::losses::{
    combine_losses, hr_anchor_loss, hr_anchor_loss_batch, margin_loss, targeted_reconstruction_loss, total_loss,
    AnchorBank, AnchorMode, LossTerms, LossWeights, MarginParams, Reduction, Resolution,
};
use directcaps::model::{Decode, Model, ModelConfig};
use directcaps::nn::Mode;
use directcaps::training::{self, Ablation, LogRecord, RecordFile, RunConfig, TrainConfig, TrainData, Trainer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Relative error scaled by `max(1, |want|)`.
pub fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

// ---------------------------------------------------------------- losses

pub fn oracle_margin(lengths: &[f64], class: usize, p: &MarginParams) -> f64 {
    lengths
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            if k == class {
                (p.m_plus - l).max(0.0).powi(2)
            } else {
                p.lambda_down * (l - p.m_minus).max(0.0).powi(2)
            }
        })
        .sum()
}

pub fn oracle_anchor(f: &[f64], anchor: &[f64]) -> f64 {
    0.5 * f.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

pub fn oracle_trecon(recon: &[f64], hr: &[f64]) -> f64 {
    recon.iter().zip(hr).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn oracle_total(margin: f64, anchor: f64, recon: f64, w: &LossWeights) -> f64 {
    margin + w.lambda1 * anchor + 0.5 * w.lambda2 * recon
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LossOracleReport {
    pub instances: usize,
    pub margin: f64,
    pub anchor: f64,
    pub trecon: f64,
    pub total: f64,
    pub batch_total: f64,
}

impl LossOracleReport {
    pub fn worst(&self) -> f64 {
        [self.margin, self.anchor, self.trecon, self.total, self.batch_total]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Library losses against direct formula evaluation on random small
/// instances. Each field holds the worst relative error.
pub fn loss_oracles(instances: usize, seed: u64) -> LossOracleReport {
    let mut r = rng(seed);
    let mut rep = LossOracleReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let k = r.random_range(2..=10);
        let d = r.random_range(1..=12);
        let px = r.random_range(1..=20);
        let p = MarginParams {
            m_plus: r.random_range(0.6..1.0),
            m_minus: r.random_range(0.0..0.4),
            lambda_down: r.random_range(0.1..1.0),
        };
        let w = LossWeights {
            lambda1: r.random_range(0.0..1.0),
            lambda2: r.random_range(0.0..1.0),
        };
        let mut bank = AnchorBank::<f64>::new(k, d, AnchorMode::Gradient);
        bank.anchors.value = Tensor::new(&[k, d], rand_vec(&mut r, k * d, -2.0, 2.0)).unwrap();

        let n = r.random_range(1..=5);
        let mut per_sample = Vec::new();
        let mut batch = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let lengths = rand_vec(&mut r, k, 0.0, 1.0);
            let class = r.random_range(0..k);
            let f = rand_vec(&mut r, d, -2.0, 2.0);
            let res = if r.random::<bool>() { Resolution::Hr } else { Resolution::Vlr };
            let recon = rand_vec(&mut r, px, 0.0, 1.0);
            let hr = rand_vec(&mut r, px, 0.0, 1.0);

            let m_want = oracle_margin(&lengths, class, &p);
            let a_want = oracle_anchor(&f, bank.anchor(class));
            let t_want = oracle_trecon(&recon, &hr);
            let total_want = oracle_total(m_want, a_want, t_want, &w);

            let lt = Tensor::vector(lengths.clone());
            let ft = Tensor::vector(f.clone());
            let rt = Tensor::vector(recon.clone());
            let ht = Tensor::vector(hr.clone());
            rep.margin = rep.margin.max(rel(margin_loss(&lt, class, &p).unwrap(), m_want));
            rep.anchor = rep.anchor.max(rel(hr_anchor_loss(&ft, class, res, &bank).unwrap(), a_want));
            rep.trecon = rep.trecon.max(rel(targeted_reconstruction_loss(&rt, &ht).unwrap(), t_want));
            let got = total_loss(&lt, class, &ft, res, &bank, &rt, &ht, &w, &p).unwrap();
            rep.total = rep.total.max(rel(got, total_want));

            per_sample.push(total_want);
            batch.0.extend(lengths);
            batch.1.push(class);
            batch.2.extend(f);
            batch.3.push(res);
            batch.4.extend(recon);
            batch.5.extend(hr);
        }

        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::new(&[n, k], batch.0).unwrap());
        let f = tape.constant(Tensor::new(&[n, d], batch.2).unwrap());
        let rc = tape.constant(Tensor::new(&[n, px], batch.4).unwrap());
        let hr = tape.constant(Tensor::new(&[n, px], batch.5).unwrap());
        let margin = directcaps::losses::margin_loss_batch(&mut tape, l, &batch.1, &p).unwrap();
        let anchor = hr_anchor_loss_batch(&mut tape, f, &batch.1, &batch.3, &bank).unwrap();
        let recon = directcaps::losses::targeted_reconstruction_loss_batch(&mut tape, rc, hr).unwrap();
        let terms = LossTerms {
            margin,
            anchor: Some(anchor),
            recon: Some(recon),
        };
        let total = combine_losses(&mut tape, terms, &w, Reduction::Mean).unwrap();
        let want = per_sample.iter().sum::<f64>() / n as f64;
        rep.batch_total = rep.batch_total.max(rel(tape.value(total).item(), want));
    }
    rep
}

// --------------------------------------------------------- stop-gradient

/// Small model used for gradient-level checks in `f64`.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        conv_filters: vec![3],
        conv_kernel: 3,
        conv_padding: 1,
        primary_types: 2,
        primary_kernel: 3,
        primary_stride: 2,
        caps_dim_primary: 4,
        caps_dim_class: 4,
        routing_iterations: 2,
        recon_hidden: [6, 8],
        batch_size: 4,
        ..ModelConfig::for_input(3, 1, 8, 8)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StopGradReport {
    /// Largest absolute anchor-gradient entry on VLR-only batches.
    pub vlr_only_max_abs: f64,
    /// Worst deviation from `Σ_HR (A^c − f)·λ₁ / batch` on mixed batches.
    pub mixed_max_abs_err: f64,
}

/// Anchor gradient of the full objective, backpropagated through a tiny
/// model, against the closed form.
pub fn stop_gradient(trials: usize, seed: u64) -> StopGradReport {
    let mut r = rng(seed);
    let mut rep = StopGradReport {
        vlr_only_max_abs: 0.0,
        mixed_max_abs_err: 0.0,
    };
    for trial in 0..trials {
        let mut cfg = tiny_config();
        cfg.loss_weights = LossWeights {
            lambda1: r.random_range(0.1..2.0),
            lambda2: r.random_range(0.0..1.0),
        };
        let lambda1 = cfg.loss_weights.lambda1;
        let k = cfg.num_classes;
        let mut model = Model::<f64>::build(cfg, r.random()).unwrap();
        for v in model.anchors.anchors.value.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        let n = r.random_range(2..=6);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let vlr_only = trial % 2 == 0;
        let res: Vec<Resolution> = (0..n)
            .map(|i| {
                if vlr_only || (i % 2 == 1 && r.random::<bool>()) {
                    Resolution::Vlr
                } else {
                    Resolution::Hr
                }
            })
            .collect();
        let x = Tensor::new(&[n, 1, 8, 8], rand_vec(&mut r, n * 64, 0.0, 1.0)).unwrap();
        let targets = Tensor::new(&[n, 64], rand_vec(&mut r, n * 64, 0.0, 1.0)).unwrap();

        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let out = model.forward_tape(&mut tape, xv, Mode::Train, Decode::Classes(&labels)).unwrap();
        let margin = directcaps::losses::margin_loss_batch(&mut tape, out.lengths, &labels, &model.config.margin).unwrap();
        let anchor = hr_anchor_loss_batch(&mut tape, out.features, &labels, &res, &model.anchors).unwrap();
        let tv = tape.constant(targets);
        let recon = directcaps::losses::targeted_reconstruction_loss_batch(&mut tape, out.recon.unwrap(), tv).unwrap();
        let terms = LossTerms {
            margin,
            anchor: Some(anchor),
            recon: Some(recon),
        };
        let total = combine_losses(&mut tape, terms, &model.config.loss_weights, Reduction::Mean).unwrap();
        tape.backward(total).unwrap();

        let d = model.feature_dim();
        let grad = tape
            .param_grad(AnchorBank::<f64>::PARAM_NAME)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[k, d]));
        let feats = tape.value(out.features).data().to_vec();
        let mut want = vec![0.0; k * d];
        for i in 0..n {
            if res[i] == Resolution::Hr {
                let c = labels[i];
                for j in 0..d {
                    want[c * d + j] += (model.anchors.anchor(c)[j] - feats[i * d + j]) * lambda1 / n as f64;
                }
            }
        }
        let err = grad
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if vlr_only {
            let max_abs = grad.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
            rep.vlr_only_max_abs = rep.vlr_only_max_abs.max(max_abs);
        } else {
            rep.mixed_max_abs_err = rep.mixed_max_abs_err.max(err);
        }
    }
    rep
}

// -------------------------------------------------------------- capsules

#[derive(Debug, Clone, Copy)]
pub struct CapsuleReport {
    pub squash_min: f64,
    pub squash_max: f64,
    pub coupling_sum_err: f64,
    pub one_iteration_err: f64,
}

/// Uniform-coupling closed form: `v_j = squash(Σ_i W_ij u_i / J)`, with
/// the squash `s·q / ((1 + q)·sqrt(q + 1e-8))`.
pub fn oracle_one_iteration(u: &[f64], w: &[f64], i_caps: usize, j_caps: usize, dout: usize, din: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(j_caps * dout);
    for j in 0..j_caps {
        let mut s = vec![0.0; dout];
        for i in 0..i_caps {
            for (o, so) in s.iter_mut().enumerate() {
                for k in 0..din {
                    *so += w[((i * j_caps + j) * dout + o) * din + k] * u[i * din + k] / j_caps as f64;
                }
            }
        }
        let q: f64 = s.iter().map(|v| v * v).sum();
        let scale = q / ((1.0 + q) * (q + 1e-8).sqrt());
        out.extend(s.iter().map(|v| v * scale));
    }
    out
}

pub fn capsule_invariants(trials: usize, seed: u64) -> CapsuleReport {
    let mut r = rng(seed);
    let mut rep = CapsuleReport {
        squash_min: f64::INFINITY,
        squash_max: 0.0,
        coupling_sum_err: 0.0,
        one_iteration_err: 0.0,
    };
    for _ in 0..trials {
        let d = r.random_range(1..=16);
        let scale = 10f64.powf(r.random_range(-3.0..1.0));
        let s = rand_vec(&mut r, d, -scale, scale);
        let len = squash(&s).iter().map(|v| v * v).sum::<f64>().sqrt();
        rep.squash_min = rep.squash_min.min(len);
        rep.squash_max = rep.squash_max.max(len);

        let (n, i, j, dout, din) = (
            r.random_range(1..=3),
            r.random_range(1..=12),
            r.random_range(2..=6),
            r.random_range(1..=6),
            r.random_range(1..=6),
        );
        let u = rand_vec(&mut r, n * i * din, -1.0, 1.0);
        let w = rand_vec(&mut r, i * j * dout * din, -1.0, 1.0);
        for iterations in [1, 2, 3] {
            for detach in [true, false] {
                let mut tape = Tape::<f64>::new();
                let uv = tape.constant(Tensor::new(&[n, i, din], u.clone()).unwrap());
                let wv = tape.constant(Tensor::new(&[i, j, dout, din], w.clone()).unwrap());
                let opts = RoutingOptions {
                    iterations,
                    detach_agreement: detach,
                };
                let (v, state) = route_batch(&mut tape, uv, wv, opts).unwrap();
                for c in &state.couplings {
                    for row in c.data().chunks(j) {
                        rep.coupling_sum_err = rep.coupling_sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                }
                if iterations == 1 {
                    let got = tape.value(v).data();
                    for b in 0..n {
                        let want = oracle_one_iteration(&u[b * i * din..(b + 1) * i * din], &w, i, j, dout, din);
                        let g = &got[b * j * dout..(b + 1) * j * dout];
                        for (a, e) in g.iter().zip(&want) {
                            rep.one_iteration_err = rep.one_iteration_err.max((a - e).abs());
                        }
                    }
                }
            }
        }
    }
    rep
}

// -------------------------------------------------------------- mcnemar

pub fn mcnemar_statistic(b: u64, c: u64) -> Option<(f64, bool)> {
    match mcnemar(&ContingencyTable { a: 0, b, c, d: 0 }) {
        McNemar::Tested {
            statistic, significant, ..
        } => Some((statistic, significant)),
        McNemar::NoDiscordantPairs => None,
    }
}

// -------------------------------------------------------------- pipeline

pub const GOLDEN_INPUT: &str = "tests/data/golden_input.png";
/// Checksums from `tests/data/golden_bicubic.py`.
pub const GOLDEN: [(usize, usize, &str); 3] = [
    (8, 8, "ec673bf3b5f2fcc18d5359b23897f87ae316978f4ff5396ebb104954998d2060"),
    (29, 31, "4014eee1782df36a02ab80b9150af0e3be13644ec0ad621ff008c758cbaeb9ac"),
    (13, 11, "bba9881d12dce71bb4146de218e69245ab081d140643b72ac1cdd0fcf730c54f"),
];

pub fn image_checksum(img: &Image) -> String {
    let mut h = Sha256::new();
    for &v in img.data() {
        h.update(((f64::from(v) * 1e6).round() as i32).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Mismatching golden resizes as `(h, w, got)`.
pub fn golden_mismatches(crate_dir: &Path) -> Vec<(usize, usize, String)> {
    let img = Image::load_png(&crate_dir.join(GOLDEN_INPUT)).expect("golden input decodes");
    GOLDEN
        .iter()
        .filter_map(|&(h, w, want)| {
            let got = image_checksum(&bicubic_resize(&img, h, w).unwrap());
            (got != want).then_some((h, w, got))
        })
        .collect()
}

/// Worst error of down-then-up bicubic resampling of constant images.
pub fn constant_round_trip(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (c, h, w) = (r.random_range(1..=3), r.random_range(2..=40), r.random_range(2..=40));
        let value: f32 = r.random();
        let img = Image::filled(c, h, w, value);
        let (sh, sw) = (r.random_range(1..h), r.random_range(1..w));
        let down = bicubic_resize(&img, sh, sw).unwrap();
        let up = bicubic_resize(&down, h, w).unwrap();
        for &v in down.data().iter().chain(up.data()) {
            worst = worst.max(f64::from((v - value).abs()));
        }
    }
    worst
}

fn oracle_hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(c, y, x, img.get(c, y, img.width() - 1 - x));
            }
        }
    }
    out
}

fn oracle_apply(ops: &AugmentOps, img: &Image) -> Image {
    let mut out = img.clone();
    if let Some(b) = ops.brightness {
        for v in out.data_mut() {
            *v = (*v + b).clamp(0.0, 1.0);
        }
    }
    if ops.flip {
        out = oracle_hflip(&out);
    }
    if let Some(win) = ops.crop {
        let mut data = Vec::new();
        for c in 0..out.channels() {
            for y in win.top..win.top + win.height {
                for x in win.left..win.left + win.width {
                    data.push(out.get(c, y, x));
                }
            }
        }
        let cropped = Image::new(out.channels(), win.height, win.width, data).unwrap();
        out = bicubic_resize(&cropped, img.height(), img.width()).unwrap();
    }
    out
}

/// Checks HR/VLR pairing and augmentation coupling on `samples` random
/// samples. Returns the first violation.
pub fn pairing_and_augmentation(samples: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let cfg = AugmentConfig {
        enabled: true,
        ..Default::default()
    };
    let mut done = 0;
    while done < samples {
        let n = r.random_range(1..=8);
        let c = r.random_range(1..=3);
        let hr_size = r.random_range(8..=20);
        let vlr_size = r.random_range(2..hr_size / 2);
        let images: Vec<Image> = (0..n).map(|_| rand_image(&mut r, c, hr_size, hr_size)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        let set = PairedSet::new(images.clone(), labels.clone(), vlr_size).map_err(|e| e.to_string())?;
        let batches = epoch_batches(n, r.random_range(1..=5), Mix::HrAndVlr, r.random(), r.random_range(0..4))
            .map_err(|e| e.to_string())?;
        let mut seen = vec![[0usize; 2]; n];
        for view in batches.concat() {
            seen[view.index][view.resolution.flag() as usize] += 1;
        }
        if seen.iter().any(|s| *s != [1, 1]) {
            return Err(format!("epoch does not visit each sample once per resolution: {seen:?}"));
        }
        for i in 0..n {
            let down = bicubic_resize(&images[i], vlr_size, vlr_size).unwrap();
            let want_vlr = bicubic_resize(&down, hr_size, hr_size).unwrap();
            let (pair_vlr, pair_hr) = make_vlr_pair(&images[i], vlr_size).unwrap();
            if pair_hr != images[i] || pair_vlr != want_vlr || set.vlr[i] != want_vlr {
                return Err(format!("VLR pairing differs from downscale-then-upscale for sample {i}"));
            }
            for res in [Resolution::Hr, Resolution::Vlr] {
                let s = set.sample(View { index: i, resolution: res });
                let want_input = if res == Resolution::Hr { &images[i] } else { &want_vlr };
                if s.label != labels[i] || s.hr_target != images[i] || &s.input != want_input || s.resolution != res {
                    return Err(format!("sample {i} ({res:?}) is not paired with its own HR target and label"));
                }
                let mut a = rng(r.random());
                let mut b = a.clone();
                let aug = augment(&s, &cfg, &mut a).unwrap();
                let ops = AugmentOps::sample(&cfg, hr_size, hr_size, &mut b);
                if aug.input != oracle_apply(&ops, &s.input) || aug.hr_target != oracle_apply(&ops, &s.hr_target) {
                    return Err(format!("augmentation of sample {i} not applied identically to input and target ({ops:?})"));
                }
                if aug.label != s.label || aug.resolution != s.resolution || !aug.input.same_geometry(&s.input) {
                    return Err(format!("augmentation changed label, resolution or geometry of sample {i}"));
                }
                done += 1;
            }
        }
    }
    Ok(())
}

// -------------------------------------------------------- determinism

/// Small 16×16 training setup for determinism checks.
pub fn small_run_config(seed: u64, epochs: u64) -> RunConfig {
    let model = ModelConfig {
        conv_filters: vec![6],
        conv_kernel: 3,
        conv_padding: 1,
        primary_types: 3,
        primary_kernel: 3,
        primary_stride: 2,
        caps_dim_primary: 4,
        caps_dim_class: 6,
        recon_hidden: [16, 24],
        batch_size: 12,
        ..ModelConfig::for_input(3, 1, 16, 16)
    };
    let train = TrainConfig {
        epochs,
        seed,
        augment: AugmentConfig {
            enabled: true,
            ..Default::default()
        },
        ..Default::default()
    };
    RunConfig::new(model, train)
}

pub fn small_data(seed: u64) -> TrainData {
    let cfg = SynthConfig {
        num_classes: 3,
        train_per_class: 12,
        test_per_class: Some(4),
        hr_size: 16,
        vlr_size: 4,
        seed,
        ..Default::default()
    };
    let split = |s| {
        let (i, l): (Vec<_>, Vec<_>) = synth_images(&cfg, s).unwrap().into_iter().unzip();
        PairedSet::new(i, l, cfg.vlr_size).unwrap()
    };
    TrainData {
        train: split(Split::Train),
        val: Some(split(Split::Test)),
    }
}

pub fn step_totals(log: &[LogRecord]) -> Vec<f64> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Step(s) => Some(s.total),
            LogRecord::Epoch(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct DeterminismReport {
    pub identical_checkpoints: bool,
    pub resume_max_loss_diff: f64,
}

/// Two identical 2-epoch runs, plus a run resumed from the epoch-1
/// checkpoint bytes compared with the uninterrupted second epoch.
pub fn determinism(seed: u64) -> DeterminismReport {
    let data = small_data(seed);
    let run = |epochs| {
        let mut t = Trainer::new(small_run_config(seed, epochs), Ablation::Full).unwrap();
        let log = training::train(&mut t, &data, None).unwrap();
        (t, log)
    };
    let (a, log_a) = run(2);
    let (b, _) = run(2);
    let identical_checkpoints = a.to_records().encode() == b.to_records().encode();

    let (first, _) = run(1);
    let bytes = first.to_records().encode();
    let path = Path::new("<memory>");
    let mut resumed = Trainer::from_records(&RecordFile::decode(&bytes, path).unwrap(), path).unwrap();
    resumed.config.train.epochs = 2;
    let log_r = training::train(&mut resumed, &data, None).unwrap();
    let full = step_totals(&log_a);
    let tail = step_totals(&log_r);
    let second = &full[full.len() - tail.len()..];
    let resume_max_loss_diff = if tail.is_empty() {
        f64::INFINITY
    } else {
        second.iter().zip(&tail).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    DeterminismReport {
        identical_checkpoints: identical_checkpoints && resumed.to_records().encode() == a.to_records().encode(),
        resume_max_loss_diff,
    }
}

// ------------------------------------------------------------ ablation

/// Epochs per run in the synthetic ablation.
pub const ABLATION_EPOCHS: u64 = 12;
pub const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

/// Desk-scale model for the 32×32 synthetic task.
pub fn ablation_config(seed: u64) -> RunConfig {
    let model = ModelConfig {
        conv_filters: vec![16],
        primary_types: 4,
        primary_kernel: 5,
        primary_stride: 3,
        recon_hidden: [64, 128],
        batch_size: 32,
        ..ModelConfig::for_input(4, 1, 32, 32)
    };
    RunConfig::new(
        model,
        TrainConfig {
            epochs: ABLATION_EPOCHS,
            seed,
            ..Default::default()
        },
    )
}

pub fn ablation_data(seed: u64) -> TrainData {
    let cfg = SynthConfig { seed, ..Default::default() };
    let split = |s| {
        let (i, l): (Vec<_>, Vec<_>) = synth_images(&cfg, s).unwrap().into_iter().unzip();
        PairedSet::new(i, l, cfg.vlr_size).unwrap()
    };
    TrainData {
        train: split(Split::Train),
        val: Some(split(Split::Test)),
    }
}

/// Final VLR test top-1 (%) for each seed.
pub fn ablation_run(ablation: Ablation, seeds: &[u64]) -> Vec<f64> {
    seeds
        .iter()
        .map(|&seed| {
            let data = ablation_data(seed);
            let mut t = Trainer::new(ablation_config(seed), ablation).unwrap();
            training::train(&mut t, &data, None).unwrap();
            t.evaluate(data.val.as_ref().unwrap()).unwrap().1
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
