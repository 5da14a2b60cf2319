//! Optimizer, checkpoints and the training loop.

mod adam;
pub mod checkpoint;

pub use adam::{AdamConfig, AdamState, Moments};
pub use checkpoint::{Record, RecordFile, RecordValue, FORMAT_VERSION, MAGIC};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{augment, epoch_batches, AugmentConfig, Image, Mix, PairedSet, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{score_images, topk_accuracy};
use crate::losses::{
    combine_losses, hr_anchor_loss_batch, margin_loss_batch, targeted_reconstruction_loss_batch, AnchorBank, AnchorMode,
    LossTerms, LossWeights, Resolution,
};
use crate::model::{stack_images, Decode, Model, ModelConfig};
use crate::nn::Mode;
use crate::seed::{derive_seed, tag};

pub const CONFIG_SCHEMA: &str = "directcaps.config/1";

/// Which auxiliary losses are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoAnchor,
    NoTrecon,
    MarginOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoAnchor, Ablation::NoTrecon, Ablation::MarginOnly];

    pub fn apply(self, w: LossWeights) -> LossWeights {
        match self {
            Ablation::Full => w,
            Ablation::NoAnchor => LossWeights { lambda1: 0.0, ..w },
            Ablation::NoTrecon => LossWeights { lambda2: 0.0, ..w },
            Ablation::MarginOnly => LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAnchor => "no_anchor",
            Ablation::NoTrecon => "no_trecon",
            Ablation::MarginOnly => "margin_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub mix: Mix,
    pub augment: AugmentConfig,
    /// Record every n-th step in the log (epoch summaries are always
    /// written).
    pub log_every: u64,
    /// Build loss terms whose weight is zero anyway. Only useful to check
    /// that a zero weight is equivalent to leaving the term out.
    pub construct_disabled_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            seed: 0,
            optimizer: AdamConfig::default(),
            mix: Mix::HrAndVlr,
            augment: AugmentConfig::default(),
            log_every: 1,
            construct_disabled_terms: false,
        }
    }
}

/// Complete experiment configuration as stored in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        RunConfig {
            schema: CONFIG_SCHEMA.into(),
            model,
            train,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unknown config schema {:?}, expected {CONFIG_SCHEMA:?}",
                self.schema
            )));
        }
        self.model.validate()?;
        self.train.optimizer.validate()?;
        self.train.augment.validate()?;
        if self.train.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the NDJSON training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Batch-reduced loss components of one optimizer step. Disabled terms are
/// `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub batch_size: usize,
    pub margin: f64,
    pub anchor: Option<f64>,
    pub recon: Option<f64>,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: u64,
    pub margin: f64,
    pub anchor: Option<f64>,
    pub recon: Option<f64>,
    pub total: f64,
    pub train_accuracy: f64,
    /// Top-1 (%) on the validation HR and VLR views.
    pub val_top1_hr: Option<f64>,
    pub val_top1_vlr: Option<f64>,
}

/// Training and optional validation data.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: PairedSet,
    pub val: Option<PairedSet>,
}

/// Owns the model and optimizer state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub ablation: Ablation,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig, ablation: Ablation) -> Result<Self> {
        config.validate()?;
        let model = Model::build(config.model.clone(), config.train.seed)?;
        let adam = AdamState::new(config.train.optimizer).with_row_sparse(&[AnchorBank::<f32>::PARAM_NAME]);
        Ok(Trainer {
            config,
            ablation,
            model,
            adam,
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn weights(&self) -> LossWeights {
        self.ablation.apply(self.config.model.loss_weights)
    }

    /// One optimizer step on a batch.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let weights = self.weights();
        let construct = self.config.train.construct_disabled_terms;
        let use_anchor = weights.lambda1 > 0.0 || construct;
        let use_recon = weights.lambda2 > 0.0 || construct;

        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let resolutions: Vec<Resolution> = batch.iter().map(|s| s.resolution).collect();
        let inputs: Vec<&Image> = batch.iter().map(|s| &s.input).collect();

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(stack_images(&inputs)?);
        let decode = if use_recon { Decode::Classes(&labels) } else { Decode::None };
        let out = self.model.forward_tape(&mut tape, x, Mode::Train, decode)?;

        let margin = margin_loss_batch(&mut tape, out.lengths, &labels, &self.config.model.margin)?;
        let anchor = if use_anchor {
            Some(hr_anchor_loss_batch(&mut tape, out.features, &labels, &resolutions, &self.model.anchors)?)
        } else {
            None
        };
        let recon = match (use_recon, out.recon) {
            (true, Some(r)) => {
                let targets: Vec<&Image> = batch.iter().map(|s| &s.hr_target).collect();
                let t = stack_images::<f32>(&targets)?;
                let n = t.shape()[0];
                let per = t.len() / n;
                let t = tape.constant(t.reshaped(&[n, per])?);
                Some(targeted_reconstruction_loss_batch(&mut tape, r, t)?)
            }
            _ => None,
        };
        let reduction = self.config.model.reduction;
        let total = combine_losses(&mut tape, LossTerms { margin, anchor, recon }, &weights, reduction)?;

        let reduce = |tape: &Tape<f32>, v: crate::autodiff::Var| {
            let d = tape.value(v).data();
            let s: f64 = d.iter().map(|&x| f64::from(x)).sum();
            match reduction {
                crate::losses::Reduction::Mean => s / d.len() as f64,
                crate::losses::Reduction::Sum => s,
            }
        };
        let k = self.config.model.num_classes;
        let correct = tape
            .value(out.lengths)
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(l, &c)| crate::capsules::predict_from_lengths(l) == c)
            .count();
        let record = StepRecord {
            epoch: self.epoch,
            step: self.global_step,
            batch_size: batch.len(),
            margin: reduce(&tape, margin),
            anchor: anchor.map(|a| reduce(&tape, a)),
            recon: recon.map(|r| reduce(&tape, r)),
            total: f64::from(tape.value(total).item()),
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            accuracy: 100.0 * correct as f64 / batch.len() as f64,
        };

        tape.backward(total)?;
        self.adam.step_from_tape(self.model.params_mut(), &tape)?;
        if matches!(self.model.anchors.mode, AnchorMode::RunningMean { .. }) {
            let feats = tape.value(out.features).data().to_vec();
            self.model.anchors.update_running_mean(&feats, &labels, &resolutions);
        }
        self.global_step += 1;
        Ok(record)
    }

    /// Runs one epoch. Non-finite values surface as
    /// [`Error::Divergence`].
    pub fn train_epoch(&mut self, data: &TrainData, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<EpochRecord> {
        let tc = &self.config.train;
        let seed = tc.seed;
        let batches = epoch_batches(data.train.len(), self.config.model.batch_size, tc.mix, seed, self.epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::AUGMENT, self.epoch]));
        let augment_cfg = tc.augment;
        let log_every = tc.log_every;

        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut has_anchor, mut has_recon) = (false, false);
        let mut seen = 0usize;
        let epoch = self.epoch;
        for views in &batches {
            let batch = views
                .iter()
                .map(|&v| augment(&data.train.sample(v), &augment_cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let step = self.global_step;
            let rec = self.train_step(&batch).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch, step },
                other => other,
            })?;
            let n = batch.len() as f64;
            sums.0 += rec.margin * n;
            sums.1 += rec.anchor.unwrap_or(0.0) * n;
            sums.2 += rec.recon.unwrap_or(0.0) * n;
            sums.3 += rec.total * n;
            sums.4 += rec.accuracy * n;
            has_anchor |= rec.anchor.is_some();
            has_recon |= rec.recon.is_some();
            seen += batch.len();
            if rec.step % log_every == 0 {
                sink(&LogRecord::Step(rec))?;
            }
        }
        let n = seen as f64;
        let (val_top1_hr, val_top1_vlr) = match &data.val {
            Some(v) => {
                let (hr, vlr) = self.evaluate(v)?;
                (Some(hr), Some(vlr))
            }
            None => (None, None),
        };
        self.epoch += 1;
        let rec = EpochRecord {
            epoch,
            steps: batches.len() as u64,
            margin: sums.0 / n,
            anchor: has_anchor.then_some(sums.1 / n),
            recon: has_recon.then_some(sums.2 / n),
            total: sums.3 / n,
            train_accuracy: sums.4 / n,
            val_top1_hr,
            val_top1_vlr,
        };
        sink(&LogRecord::Epoch(rec.clone()))?;
        Ok(rec)
    }

    /// Eval-mode top-1 (%) on the HR and VLR views of a set.
    pub fn evaluate(&mut self, set: &PairedSet) -> Result<(f64, f64)> {
        let ids: Vec<String> = (0..set.len()).map(|i| i.to_string()).collect();
        let bs = self.config.model.batch_size;
        let hr = score_images(&mut self.model, &set.hr, &set.labels, &ids, bs)?;
        let vlr = score_images(&mut self.model, &set.vlr, &set.labels, &ids, bs)?;
        Ok((topk_accuracy(&hr, 1)?, topk_accuracy(&vlr, 1)?))
    }

    pub fn to_records(&self) -> RecordFile {
        let mut f = RecordFile::default();
        f.push("config", RecordValue::Text(self.config.to_toml()));
        f.push("ablation", RecordValue::Text(self.ablation.as_str().into()));
        f.push("epoch", RecordValue::U64(self.epoch));
        f.push("global_step", RecordValue::U64(self.global_step));
        // Data order and augmentation streams derive from (seed, epoch).
        f.push("rng.seed", RecordValue::U64(self.config.train.seed));
        f.push("rng.epoch", RecordValue::U64(self.epoch));
        for p in self.model.state() {
            f.push(format!("param/{}", p.name), RecordValue::Tensor(p.value.clone()));
        }
        f.push("adam.step", RecordValue::U64(self.adam.step));
        for (name, m) in &self.adam.moments {
            f.push(format!("adam.m/{name}"), RecordValue::Tensor(m.m.clone()));
            f.push(format!("adam.v/{name}"), RecordValue::Tensor(m.v.clone()));
        }
        f
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_records().save(path)
    }

    pub fn from_records(f: &RecordFile, path: &Path) -> Result<Self> {
        let corrupt = |d: String| Error::corrupt(path, d);
        let text = |name: &str| match f.get(name) {
            Some(RecordValue::Text(s)) => Ok(s.clone()),
            _ => Err(corrupt(format!("missing text record {name:?}"))),
        };
        let int = |name: &str| match f.get(name) {
            Some(RecordValue::U64(v)) => Ok(*v),
            _ => Err(corrupt(format!("missing integer record {name:?}"))),
        };
        let config = RunConfig::from_toml(&text("config")?).map_err(|e| corrupt(format!("embedded config: {e}")))?;
        let ablation = match text("ablation")?.as_str() {
            "full" => Ablation::Full,
            "no_anchor" => Ablation::NoAnchor,
            "no_trecon" => Ablation::NoTrecon,
            "margin_only" => Ablation::MarginOnly,
            other => return Err(corrupt(format!("unknown ablation {other:?}"))),
        };
        let mut t = Trainer::new(config, ablation)?;
        t.epoch = int("epoch")?;
        t.global_step = int("global_step")?;
        for p in t.model.state_mut() {
            match f.get(&format!("param/{}", p.name)) {
                Some(RecordValue::Tensor(v)) if v.shape() == p.value.shape() => p.value = v.clone(),
                Some(_) => return Err(corrupt(format!("parameter {} has the wrong shape", p.name))),
                None => return Err(corrupt(format!("missing parameter {}", p.name))),
            }
        }
        t.adam.step = int("adam.step")?;
        for r in &f.records {
            let Some(name) = r.name.strip_prefix("adam.m/") else { continue };
            let (Some(RecordValue::Tensor(m)), Some(RecordValue::Tensor(v))) = (f.get(&r.name), f.get(&format!("adam.v/{name}")))
            else {
                return Err(corrupt(format!("incomplete optimizer state for {name}")));
            };
            t.adam.moments.insert(name.to_string(), Moments { m: m.clone(), v: v.clone() });
        }
        Ok(t)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_records(&RecordFile::load(path)?, path)
    }
}

/// File names inside a training output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.dcc";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const SUMMARY_FILE: &str = "summary.json";

/// Trains until `config.train.epochs` epochs are complete, writing the log
/// and an end-of-epoch checkpoint into `out_dir` when given. On divergence
/// the previous checkpoint stays in place.
pub fn train(trainer: &mut Trainer, data: &TrainData, out_dir: Option<&Path>) -> Result<Vec<LogRecord>> {
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((f, p))
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.epoch < trainer.config.train.epochs {
        let mut sink = |r: &LogRecord| -> Result<()> {
            if let Some((f, p)) = log_file.as_mut() {
                let line = serde_json::to_string(r).expect("log record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            records.push(r.clone());
            Ok(())
        };
        trainer.train_epoch(data, &mut sink)?;
        if let Some(dir) = out_dir {
            trainer.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    Ok(records)
}

/// Final metrics written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ablation: Ablation,
    pub seed: u64,
    pub epochs: u64,
    pub steps: u64,
    pub final_total_loss: Option<f64>,
    pub val_top1_hr: Option<f64>,
    pub val_top1_vlr: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl Summary {
    pub fn from_log(trainer: &Trainer, log: &[LogRecord], checkpoint: Option<PathBuf>) -> Self {
        let last = log.iter().rev().find_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            LogRecord::Step(_) => None,
        });
        Summary {
            ablation: trainer.ablation,
            seed: trainer.config.train.seed,
            epochs: trainer.epoch,
            steps: trainer.global_step,
            final_total_loss: last.map(|e| e.total),
            val_top1_hr: last.and_then(|e| e.val_top1_hr),
            val_top1_vlr: last.and_then(|e| e.val_top1_vlr),
            checkpoint,
        }
    }
}

/// Parses an NDJSON training log.
pub fn read_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("log line {}: {e}", i + 1))))
        .collect()
}

/// Convenience: tensor of a parameter by name.
pub fn param_value<'a>(model: &'a Model<f32>, name: &str) -> Option<&'a Tensor<f32>> {
    model.state().into_iter().find(|p| p.name == name).map(|p| &p.value)
}
