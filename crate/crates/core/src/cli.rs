//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{synth_dataset, DatasetManifest, PairedSet, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    mcnemar, paired_table, read_id_values_file, score_images, topk_accuracy, write_id_values_file, export_scores_file,
    IdValue, McNemar, ScoreRecord,
};
use crate::gradsuite::{run_suite, SuiteOptions, DEFAULT_TOL, DEFAULT_TRIALS};
use crate::model::{reconstruct_grid, ModelConfig};
use crate::training::{self, Ablation, RunConfig, Summary, TrainConfig, TrainData, Trainer};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DIRECTCAPS_THREADS";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const RECON_GRID_FILE: &str = "recon_grid.png";
pub const RECON_FILE: &str = "recon.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.toml";

pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CORRUPT: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "directcaps", version, about = "Dual directed capsule network for very-low-resolution recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Score a split with a trained checkpoint.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// McNemar test between two prediction files.
    Mcnemar(McnemarArgs),
    /// Generate the synthetic glyph dataset.
    Synth(SynthArgs),
    /// Export a reconstruction grid for HR/VLR pairs.
    Recon(ReconArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML). Defaults follow the dataset geometry.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; must not exist yet.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Ablation::Full)]
    pub ablation: Ablation,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Continue from a checkpoint (its configuration and ablation win).
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Also write a reconstruction grid.
    #[arg(long)]
    pub emit_recon: bool,
    /// Rows in the reconstruction grid.
    #[arg(long, default_value_t = 8)]
    pub recon_rows: usize,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 8)]
    pub rows: usize,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Relative error tolerance.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only run cases whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    /// Adds a case with a deliberately wrong gradient.
    #[arg(long, hide = true)]
    pub inject_bug: bool,
}

#[derive(Debug, Args)]
pub struct McnemarArgs {
    /// `sample_id,predicted` CSV of the first system.
    pub predictions_a: PathBuf,
    /// `sample_id,predicted` CSV of the second system.
    pub predictions_b: PathBuf,
    /// `sample_id,label` CSV.
    pub labels: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory; must not exist yet.
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic dataset configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Corrupt { .. } | Error::VersionMismatch { .. } | Error::Image { .. } => exit::CORRUPT,
        Error::NonFinite { .. }
        | Error::NonFiniteGradient { .. }
        | Error::Divergence { .. }
        | Error::GradCheck(_)
        | Error::Backward(_) => exit::CHECK_FAILED,
        Error::Shape { .. } | Error::InvalidArgument(_) | Error::Io { .. } | Error::Config(_) => exit::USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    let command_line: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, &command_line),
        Command::Eval(a) => cmd_eval(&a, &command_line),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Mcnemar(a) => cmd_mcnemar(&a),
        Command::Synth(a) => cmd_synth(&a, &command_line),
        Command::Recon(a) => cmd_recon(&a, &command_line),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Output directory assembled under a sibling staging name and renamed
/// into place on commit. Dropped uncommitted, it is removed.
pub struct StagedDir {
    staging: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl StagedDir {
    pub fn new(target: &Path) -> Result<Self> {
        if target.exists() {
            return Err(Error::InvalidArgument(format!("output {} already exists", target.display())));
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("output {} has no directory name", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let staging = parent.join(format!(".{}.staging-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(StagedDir {
            staging,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.staging, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub git_describe: &'static str,
    pub command_line: Vec<String>,
    pub seed: Option<u64>,
    pub config_sha256: Option<String>,
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command_line: &[String]) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            git_describe: env!("DIRECTCAPS_GIT_DESCRIBE"),
            command_line: command_line.to_vec(),
            seed: None,
            config_sha256: None,
            inputs: BTreeMap::new(),
        }
    }

    fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.to_string(), path.display().to_string());
        self
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST_FILE), self)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
        ));
    }
    DatasetManifest::load(path)
}

fn check_geometry(model: &ModelConfig, m: &DatasetManifest) -> Result<()> {
    let want = (m.num_classes, m.channels, m.hr_size, m.hr_size);
    let have = (model.num_classes, model.channels, model.height, model.width);
    if want != have {
        return Err(Error::Config(format!(
            "model expects (classes, channels, height, width) = {have:?} but the dataset provides {want:?}"
        )));
    }
    Ok(())
}

fn run_config(args: &TrainArgs, manifest: &DatasetManifest) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(
            ModelConfig::for_input(manifest.num_classes, manifest.channels, manifest.hr_size, manifest.hr_size),
            TrainConfig::default(),
        ),
    };
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(args: &TrainArgs, command_line: &[String]) -> Result<i32> {
    let manifest = load_manifest(&args.manifest)?;
    let mut trainer = match &args.resume {
        Some(ck) => {
            let mut t = Trainer::load_checkpoint(ck)?;
            if let Some(e) = args.epochs {
                t.config.train.epochs = e;
            }
            t
        }
        None => Trainer::new(run_config(args, &manifest)?, args.ablation)?,
    };
    check_geometry(&trainer.config.model, &manifest)?;
    let data = TrainData {
        train: PairedSet::from_split(manifest.load_split(Split::Train)?, manifest.vlr_size)?,
        val: {
            let test = manifest.load_split(Split::Test)?;
            (!test.is_empty())
                .then(|| PairedSet::from_split(test, manifest.vlr_size))
                .transpose()?
        },
    };

    let staged = StagedDir::new(&args.out)?;
    let dir = staged.path().to_path_buf();
    let config_text = trainer.config.to_toml();
    fs::write(dir.join(EFFECTIVE_CONFIG_FILE), &config_text).map_err(|e| Error::io(dir.join(EFFECTIVE_CONFIG_FILE), e))?;
    let mut run = RunManifest::new(command_line).input("manifest", &args.manifest);
    if let Some(ck) = &args.resume {
        run = run.input("resume", ck);
    }
    run.seed = Some(trainer.config.train.seed);
    run.config_sha256 = Some(sha256_hex(config_text.as_bytes()));
    run.write(&dir)?;

    eprintln!(
        "training {} ({} parameters) for {} epochs, ablation {}",
        args.manifest.display(),
        trainer.model.num_parameters(),
        trainer.config.train.epochs,
        trainer.ablation.as_str()
    );
    let outcome = training::train(&mut trainer, &data, Some(&dir));
    let log = training::read_log(
        &fs::read_to_string(dir.join(training::LOG_FILE)).unwrap_or_default(),
    )?;
    for r in &log {
        if let training::LogRecord::Epoch(e) = r {
            eprintln!(
                "epoch {:>3}  loss {:.5}  train {:.2}%  val hr {}  val vlr {}",
                e.epoch,
                e.total,
                e.train_accuracy,
                fmt_pct(e.val_top1_hr),
                fmt_pct(e.val_top1_vlr)
            );
        }
    }
    let checkpoint = dir.join(training::CHECKPOINT_FILE);
    let rel_checkpoint = checkpoint.is_file().then(|| PathBuf::from(training::CHECKPOINT_FILE));
    write_json(&dir.join(training::SUMMARY_FILE), &Summary::from_log(&trainer, &log, rel_checkpoint))?;
    match outcome {
        Ok(_) => {
            let out = staged.commit()?;
            println!("wrote {}", out.display());
            Ok(exit::OK)
        }
        // Keep the log and the last good checkpoint for inspection.
        Err(e @ (Error::Divergence { .. } | Error::NonFiniteGradient { .. })) => {
            let out = staged.commit()?;
            eprintln!("partial run kept in {}", out.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}%"))
}

#[derive(Debug, Serialize)]
pub struct ViewMetrics {
    pub top1: f64,
    pub top5: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvalMetrics {
    pub split: String,
    pub samples: usize,
    pub hr: ViewMetrics,
    pub vlr: ViewMetrics,
    pub mean_recon_mse: Option<f64>,
}

fn view_metrics(records: &[ScoreRecord], classes: usize) -> Result<ViewMetrics> {
    Ok(ViewMetrics {
        top1: topk_accuracy(records, 1)?,
        top5: (classes >= 5).then(|| topk_accuracy(records, 5)).transpose()?,
    })
}

fn predictions(records: &[ScoreRecord]) -> Vec<IdValue> {
    records
        .iter()
        .map(|r| IdValue {
            sample_id: r.sample_id.clone(),
            value: r.predicted(),
        })
        .collect()
}

struct Loaded {
    trainer: Trainer,
    set: PairedSet,
    ids: Vec<String>,
}

fn load_for_eval(checkpoint: &Path, manifest_path: &Path, split: Split) -> Result<Loaded> {
    let manifest = load_manifest(manifest_path)?;
    let trainer = Trainer::load_checkpoint(checkpoint)?;
    check_geometry(&trainer.config.model, &manifest)?;
    let loaded = manifest.load_split(split)?;
    if loaded.is_empty() {
        return Err(Error::InvalidArgument(format!("{} split of {} is empty", split.as_str(), manifest_path.display())));
    }
    let ids = loaded.files.iter().map(|f| f.to_string_lossy().replace('\\', "/")).collect();
    Ok(Loaded {
        trainer,
        set: PairedSet::from_split(loaded, manifest.vlr_size)?,
        ids,
    })
}

/// First `rows` samples in class order, one class at a time.
fn recon_samples(set: &PairedSet, rows: usize) -> Vec<(crate::data::Image, crate::data::Image, usize)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in set.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut picked = Vec::new();
    let mut depth = 0;
    while picked.len() < rows.min(set.len()) {
        for idx in by_class.values() {
            if let Some(&i) = idx.get(depth) {
                if picked.len() < rows {
                    picked.push(i);
                }
            }
        }
        depth += 1;
    }
    picked
        .into_iter()
        .map(|i| (set.hr[i].clone(), set.vlr[i].clone(), set.labels[i]))
        .collect()
}

fn write_recon(loaded: &mut Loaded, rows: usize, dir: &Path) -> Result<Option<f64>> {
    let samples = recon_samples(&loaded.set, rows);
    let grid = reconstruct_grid(&mut loaded.trainer.model, &samples)?;
    if let Some(img) = grid.to_image()? {
        img.save_png(&dir.join(RECON_GRID_FILE))?;
    }
    #[derive(Serialize)]
    struct Row {
        label: usize,
        recon_mse: f64,
    }
    let rows: Vec<Row> = grid
        .rows
        .iter()
        .map(|r| Row {
            label: r.label,
            recon_mse: r.recon_mse,
        })
        .collect();
    write_json(&dir.join(RECON_FILE), &rows)?;
    Ok(grid.mean_recon_mse())
}

pub fn cmd_eval(args: &EvalArgs, command_line: &[String]) -> Result<i32> {
    let split: Split = args.split.into();
    let mut loaded = load_for_eval(&args.checkpoint, &args.manifest, split)?;
    let bs = loaded.trainer.config.model.batch_size;
    let classes = loaded.trainer.config.model.num_classes;
    let model = &mut loaded.trainer.model;
    let hr = score_images(model, &loaded.set.hr, &loaded.set.labels, &loaded.ids, bs)?;
    let vlr = score_images(model, &loaded.set.vlr, &loaded.set.labels, &loaded.ids, bs)?;

    let staged = StagedDir::new(&args.out)?;
    let dir = staged.path().to_path_buf();
    export_scores_file(&hr, &dir.join("scores_hr.csv"))?;
    export_scores_file(&vlr, &dir.join("scores_vlr.csv"))?;
    write_id_values_file(&predictions(&hr), "predicted", &dir.join("predictions_hr.csv"))?;
    write_id_values_file(&predictions(&vlr), "predicted", &dir.join("predictions_vlr.csv"))?;
    let labels: Vec<IdValue> = hr
        .iter()
        .map(|r| IdValue {
            sample_id: r.sample_id.clone(),
            value: r.true_class,
        })
        .collect();
    write_id_values_file(&labels, "label", &dir.join("labels.csv"))?;
    let mean_recon_mse = if args.emit_recon {
        write_recon(&mut loaded, args.recon_rows, &dir)?
    } else {
        None
    };
    let metrics = EvalMetrics {
        split: split.as_str().to_string(),
        samples: hr.len(),
        hr: view_metrics(&hr, classes)?,
        vlr: view_metrics(&vlr, classes)?,
        mean_recon_mse,
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    let mut run = RunManifest::new(command_line)
        .input("checkpoint", &args.checkpoint)
        .input("manifest", &args.manifest);
    run.seed = Some(loaded.trainer.config.train.seed);
    run.config_sha256 = Some(sha256_hex(loaded.trainer.config.to_toml().as_bytes()));
    run.write(&dir)?;
    let out = staged.commit()?;

    println!("split {} ({} samples)", metrics.split, metrics.samples);
    for (name, m) in [("hr", &metrics.hr), ("vlr", &metrics.vlr)] {
        match m.top5 {
            Some(t5) => println!("{name:<4} top-1 {:.2}%  top-5 {t5:.2}%", m.top1),
            None => println!("{name:<4} top-1 {:.2}%", m.top1),
        }
    }
    if let Some(mse) = metrics.mean_recon_mse {
        println!("mean HR/VLR reconstruction MSE {mse:.6}");
    }
    println!("wrote {}", out.display());
    Ok(exit::OK)
}

pub fn cmd_recon(args: &ReconArgs, command_line: &[String]) -> Result<i32> {
    let mut loaded = load_for_eval(&args.checkpoint, &args.manifest, args.split.into())?;
    let staged = StagedDir::new(&args.out)?;
    let dir = staged.path().to_path_buf();
    let mse = write_recon(&mut loaded, args.rows, &dir)?;
    RunManifest::new(command_line)
        .input("checkpoint", &args.checkpoint)
        .input("manifest", &args.manifest)
        .write(&dir)?;
    let out = staged.commit()?;
    if let Some(mse) = mse {
        println!("mean HR/VLR reconstruction MSE {mse:.6}");
    }
    println!("wrote {}", out.display());
    Ok(exit::OK)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    if !(args.tol > 0.0) || args.trials == 0 {
        return Err(Error::InvalidArgument("tolerance and trial count must be positive".into()));
    }
    let opts = SuiteOptions {
        tol: args.tol,
        trials: args.trials,
        seed: args.seed,
        inject_bug: args.inject_bug,
        filter: args.filter.clone(),
        ..Default::default()
    };
    let results = run_suite(&opts);
    if results.is_empty() {
        return Err(Error::InvalidArgument(format!("no gradient cases match {:?}", args.filter)));
    }
    for r in &results {
        let status = if r.passed { "ok  " } else { "FAIL" };
        println!("{status} {:<32} trials {:>3}  worst rel err {:.3e}", r.name, r.trials, r.worst_error);
        if let Some(e) = &r.error {
            println!("     {e}");
        }
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        println!("all {} cases pass at tolerance {:e}", results.len(), args.tol);
        return Ok(exit::OK);
    }
    let worst = failed
        .iter()
        .max_by(|a, b| a.worst_error.total_cmp(&b.worst_error))
        .expect("non-empty");
    eprintln!(
        "{} of {} cases failed; worst offender {} (rel err {:.3e}, trial {})",
        failed.len(),
        results.len(),
        worst.name,
        worst.worst_error,
        worst.worst_trial
    );
    Ok(exit::CHECK_FAILED)
}

pub fn cmd_mcnemar(args: &McnemarArgs) -> Result<i32> {
    let a = read_id_values_file(&args.predictions_a)?;
    let b = read_id_values_file(&args.predictions_b)?;
    let labels = read_id_values_file(&args.labels)?;
    let t = paired_table(&a, &b, &labels)?;
    println!("                 B correct  B wrong");
    println!("A correct  {:>14} {:>8}", t.a, t.b);
    println!("A wrong    {:>14} {:>8}", t.c, t.d);
    let result = mcnemar(&t);
    println!("{result}");
    if let McNemar::Tested { .. } = result {
        println!("b = {}, c = {}, n = {}", t.b, t.c, t.total());
    }
    Ok(exit::OK)
}

pub fn cmd_synth(args: &SynthArgs, command_line: &[String]) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let staged = StagedDir::new(&args.out)?;
    let dir = staged.path().to_path_buf();
    let manifest = synth_dataset(&dir, &cfg)?;
    let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("synth.toml"), &text).map_err(|e| Error::io(dir.join("synth.toml"), e))?;
    let mut run = RunManifest::new(command_line);
    run.seed = Some(cfg.seed);
    run.config_sha256 = Some(sha256_hex(text.as_bytes()));
    run.write(&dir)?;
    let out = staged.commit()?;
    println!(
        "wrote {} training and {} test images to {}",
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count(),
        out.display()
    );
    println!("manifest: {}", out.join("manifest.toml").display());
    Ok(exit::OK)
}
