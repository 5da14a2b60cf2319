mod common;

use directcaps::data::{Sample, View};
use directcaps::losses::{AnchorBank, LossWeights, Resolution};
use directcaps::training::{self, Ablation, LogRecord, RecordFile, Trainer};
use directcaps::Error;

fn batch(data: &training::TrainData, idx: &[usize], res: Resolution) -> Vec<Sample> {
    idx.iter()
        .map(|&index| data.train.sample(View { index, resolution: res }))
        .collect()
}

fn snapshot(t: &Trainer) -> Vec<(String, Vec<f32>)> {
    t.model
        .state()
        .into_iter()
        .map(|p| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

#[test]
fn anchor_gradient_stop_and_closed_form() {
    let rep = common::stop_gradient(20, 2);
    assert_eq!(rep.vlr_only_max_abs, 0.0, "{rep:?}");
    assert!(rep.mixed_max_abs_err < 1e-5, "{rep:?}");
}

#[test]
fn vlr_only_batch_leaves_anchors_untouched() {
    let data = common::small_data(0);
    let mut t = Trainer::new(common::small_run_config(0, 1), Ablation::Full).unwrap();
    // Give the anchors history first so Adam momentum would move them.
    t.train_step(&batch(&data, &[0, 1, 2, 3], Resolution::Hr)).unwrap();
    let before = snapshot(&t);
    let rec = t.train_step(&batch(&data, &[4, 5, 6, 7], Resolution::Vlr)).unwrap();
    assert!(rec.anchor.unwrap() > 0.0);
    let after = snapshot(&t);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if name == AnchorBank::<f32>::PARAM_NAME {
            assert_eq!(a, b, "anchors moved on a VLR-only batch");
        }
    }
    assert_ne!(before, after, "nothing else moved");
}

#[test]
fn logged_total_is_weighted_sum_of_components() {
    let data = common::small_data(1);
    let mut cfg = common::small_run_config(1, 2);
    cfg.model.loss_weights = LossWeights {
        lambda1: 0.01,
        lambda2: 0.3,
    };
    let mut t = Trainer::new(cfg, Ablation::Full).unwrap();
    let log = training::train(&mut t, &data, None).unwrap();
    let mut steps = 0;
    for r in &log {
        if let LogRecord::Step(s) = r {
            let want = s.margin + s.lambda1 * s.anchor.unwrap() + 0.5 * s.lambda2 * s.recon.unwrap();
            assert!((s.total - want).abs() <= 1e-6 * want.abs().max(1.0), "{s:?}");
            steps += 1;
        }
    }
    assert_eq!(steps, 2 * 6);
}

#[test]
fn zero_weights_match_a_build_without_those_terms() {
    let data = common::small_data(2);
    let run = |construct: bool, ablation: Ablation| {
        let mut cfg = common::small_run_config(2, 2);
        cfg.train.construct_disabled_terms = construct;
        let mut t = Trainer::new(cfg, ablation).unwrap();
        let log = training::train(&mut t, &data, None).unwrap();
        (snapshot(&t), common::step_totals(&log))
    };
    let lean = run(false, Ablation::MarginOnly);
    let built = run(true, Ablation::MarginOnly);
    assert_eq!(lean.1, built.1);
    for ((na, a), (nb, b)) in lean.0.iter().zip(&built.0) {
        assert_eq!(na, nb);
        let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{na} differs");
    }
}

#[test]
fn identical_runs_and_exact_resume() {
    let rep = common::determinism(4);
    assert!(rep.identical_checkpoints);
    assert!(rep.resume_max_loss_diff <= 1e-6, "{rep:?}");
}

#[test]
fn margin_only_beats_chance_within_five_epochs() {
    let cfg = directcaps::data::SynthConfig {
        num_classes: 4,
        train_per_class: 30,
        test_per_class: Some(10),
        hr_size: 16,
        vlr_size: 4,
        ..Default::default()
    };
    let split = |s| {
        let (i, l): (Vec<_>, Vec<_>) = directcaps::data::synth_images(&cfg, s).unwrap().into_iter().unzip();
        directcaps::data::PairedSet::new(i, l, 4).unwrap()
    };
    let data = training::TrainData {
        train: split(directcaps::data::Split::Train),
        val: Some(split(directcaps::data::Split::Test)),
    };
    let mut rc = common::small_run_config(0, 5);
    rc.model.num_classes = 4;
    let mut t = Trainer::new(rc, Ablation::MarginOnly).unwrap();
    let log = training::train(&mut t, &data, None).unwrap();
    let best = log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch(e) => e.val_top1_hr,
            LogRecord::Step(_) => None,
        })
        .fold(0.0, f64::max);
    assert!(best > 25.0, "best HR top-1 {best}");
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let data = common::small_data(3);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(common::small_run_config(3, 1), Ablation::Full).unwrap();
    training::train(&mut t, &data, Some(dir.path())).unwrap();
    let ck = dir.path().join(training::CHECKPOINT_FILE);
    let good = std::fs::read(&ck).unwrap();

    t.config.train.epochs = 3;
    t.adam.config.lr = 1e30;
    let err = training::train(&mut t, &data, Some(dir.path())).unwrap_err();
    assert!(
        matches!(err, Error::Divergence { epoch: 1, .. } | Error::NonFiniteGradient { .. }),
        "{err}"
    );
    assert_eq!(std::fs::read(&ck).unwrap(), good);
    let restored = Trainer::from_records(&RecordFile::load(&ck).unwrap(), &ck).unwrap();
    assert_eq!(restored.epoch, 1);
}

#[test]
fn checkpoint_file_round_trip_restores_state() {
    let data = common::small_data(5);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(common::small_run_config(5, 1), Ablation::NoTrecon).unwrap();
    training::train(&mut t, &data, Some(dir.path())).unwrap();
    let loaded = Trainer::load_checkpoint(&dir.path().join(training::CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.ablation, Ablation::NoTrecon);
    assert_eq!((loaded.epoch, loaded.global_step), (t.epoch, t.global_step));
    assert_eq!(snapshot(&loaded), snapshot(&t));
    assert_eq!(loaded.to_records().encode(), t.to_records().encode());
}
