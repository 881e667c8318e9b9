//! `surfuse` — train, evaluate, and benchmark the two-branch surface
//! classifier on paired vision/tactile image datasets.
//!
//! Exit codes: 0 success, 2 missing checkpoint/paths or unusable data,
//! 3 invalid configuration, 4 numeric failure (non-finite loss), 1 other.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::{write_resolved, FileConfig, ResolvedConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use surfuse_core::bench::{bench_inference, BenchScope, LatencyReport};
use surfuse_core::data::{
    load_directory, stratified_split, synth_generate, write_to_directory, DataError,
    DatasetManifest, RgbImage, SynthSpec,
};
use surfuse_core::eval::evaluate;
use surfuse_core::model::checkpoint::{load_checkpoint, read_meta, CheckpointError};
use surfuse_core::model::{composed_model_gradcheck, SurformerModel};
use surfuse_core::tensor::gradcheck::check_all_primitives;
use surfuse_core::tensor::{Dtype, Scalar, TensorError};
use surfuse_core::train::{fit, TrainError};

#[derive(Parser)]
#[command(name = "surfuse", version, about = "Multimodal surface-material classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    Test,
    Train,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeChoice {
    Full,
    Model,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-texture dataset.
    GenData {
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Replace vision images with uniform noise.
        #[arg(long)]
        vision_noise: bool,
        /// Replace tactile images with uniform noise.
        #[arg(long)]
        tactile_noise: bool,
    },
    /// Train on a dataset directory and write a checkpoint plus logs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON config file; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr_vision: Option<f64>,
        #[arg(long)]
        lr_tactile: Option<f64>,
        #[arg(long)]
        lr_fusion: Option<f64>,
        #[arg(long)]
        aux_weight: Option<f64>,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long)]
        train_ratio: Option<f64>,
        #[arg(long)]
        input_hw: Option<usize>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// Evaluate a checkpoint and write the metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
        /// Split seed; defaults to the seed stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_ratio: Option<f64>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Measure batch-1 inference latency in both scopes.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, value_enum, default_value_t = ScopeChoice::Both)]
        scope: ScopeChoice,
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_ratio: Option<f64>,
    },
    /// Run the finite-difference gradient suite and print max errors.
    Gradcheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

#[derive(Debug)]
enum CliError {
    MissingPath(String),
    InvalidConfig(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingPath(_) => 2,
            CliError::InvalidConfig(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::MissingPath(m)
            | CliError::InvalidConfig(m)
            | CliError::Numeric(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::InvalidConfig(e.to_string()),
            DataError::Stratification(_) => CliError::InvalidConfig(e.to_string()),
            _ => CliError::MissingPath(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric(_) => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::InvalidConfig(e.to_string()),
            TrainError::Tensor(TensorError::Config(_)) => CliError::InvalidConfig(e.to_string()),
            TrainError::Data(d) => CliError::from(d),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::MissingPath(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Config(_) => CliError::InvalidConfig(e.to_string()),
            TensorError::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::MissingPath(format!("io error: {e}"))
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("SURFUSE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            classes,
            per_class,
            seed,
            out,
            vision_noise,
            tactile_noise,
        } => gen_data(classes, per_class, seed, &out, vision_noise, tactile_noise),
        Command::Train {
            data,
            out,
            config,
            seed,
            epochs,
            batch_size,
            lr_vision,
            lr_tactile,
            lr_fusion,
            aux_weight,
            val_fraction,
            train_ratio,
            input_hw,
            precision,
        } => {
            let mut cfg = match &config {
                Some(path) => FileConfig::load(path).map_err(CliError::InvalidConfig)?,
                None => FileConfig::default(),
            };
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(v) = epochs {
                cfg.train.max_epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = lr_vision {
                cfg.train.lr_vision = v;
            }
            if let Some(v) = lr_tactile {
                cfg.train.lr_tactile = v;
            }
            if let Some(v) = lr_fusion {
                cfg.train.lr_fusion = v;
            }
            if let Some(v) = aux_weight {
                cfg.train.aux_weight = v;
            }
            if let Some(v) = val_fraction {
                cfg.train.val_fraction = v;
            }
            if let Some(v) = train_ratio {
                cfg.train_ratio = v;
            }
            if let Some(v) = input_hw {
                cfg.vision.input_hw = v;
                cfg.preprocess.size = v;
            }
            match precision {
                Precision::F32 => train_cmd::<f32>(&data, &out, cfg),
                Precision::F64 => train_cmd::<f64>(&data, &out, cfg),
            }
        }
        Command::Eval {
            ckpt,
            data,
            out,
            split,
            seed,
            train_ratio,
            batch_size,
        } => {
            let meta = read_meta(&ckpt)?;
            match meta.dtype {
                Dtype::F32 => eval_cmd::<f32>(&ckpt, &data, out, split, seed, train_ratio, batch_size),
                Dtype::F64 => eval_cmd::<f64>(&ckpt, &data, out, split, seed, train_ratio, batch_size),
            }
        }
        Command::Bench {
            ckpt,
            data,
            out,
            warmup,
            iters,
            scope,
            split,
            seed,
            train_ratio,
        } => {
            let meta = read_meta(&ckpt)?;
            match meta.dtype {
                Dtype::F32 => {
                    bench_cmd::<f32>(&ckpt, &data, out, warmup, iters, scope, split, seed, train_ratio)
                }
                Dtype::F64 => {
                    bench_cmd::<f64>(&ckpt, &data, out, warmup, iters, scope, split, seed, train_ratio)
                }
            }
        }
        Command::Gradcheck { seed, trials } => gradcheck_cmd(seed, trials),
    }
}

fn gen_data(
    classes: usize,
    per_class: usize,
    seed: u64,
    out: &Path,
    vision_noise: bool,
    tactile_noise: bool,
) -> Result<(), CliError> {
    let spec = SynthSpec {
        n_classes: classes,
        per_class,
        seed,
        vision_noise,
        tactile_noise,
    };
    let manifest = synth_generate(&spec)?;
    std::fs::create_dir_all(out)?;
    write_to_directory(&manifest, out)?;
    let cfg = FileConfig::default();
    write_resolved(
        out,
        &ResolvedConfig {
            command: "gen-data",
            precision: "n/a",
            data: Some(out.display().to_string()),
            n_classes: Some(classes),
            config: &cfg,
            extras: serde_json::json!({
                "spec": spec,
            }),
        },
    )?;
    println!(
        "generated {} samples across {} classes under {}",
        manifest.samples.len(),
        classes,
        out.display()
    );
    Ok(())
}

fn train_cmd<S: Scalar>(data: &Path, out: &Path, cfg: FileConfig) -> Result<(), CliError> {
    let (manifest, warnings) = load_directory(data)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let n_classes = manifest.classes.len();
    let (train_set, _test_set) = stratified_split(&manifest, cfg.train_ratio, cfg.train.seed)?;

    let vision_cfg = cfg.vision.clone().into_branch_config(n_classes);
    let tactile_cfg = cfg.tactile.clone().into_branch_config(n_classes);
    let mut model =
        SurformerModel::<S>::new(vision_cfg, tactile_cfg, cfg.train.seed).map_err(CliError::from)?;

    let result = fit(&mut model, &train_set, &cfg.train, &cfg.preprocess)?;
    if result.freeze.clamped {
        eprintln!(
            "warning: freeze policy requested {} unfrozen tensors but the backbone has {}; clamped",
            result.freeze.requested, result.freeze.backbone_tensors
        );
    }

    std::fs::create_dir_all(out)?;
    surfuse_core::model::checkpoint::save_checkpoint(
        &out.join("best.ckpt"),
        &model,
        &result.normalizer,
        &cfg.preprocess,
        &manifest.classes,
        cfg.train.seed,
    )
    .map_err(CliError::from)?;

    let mut csv = Vec::new();
    result
        .log
        .write_csv(&mut csv)
        .map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(out.join("trainlog.csv"), &csv)?;
    std::fs::write(out.join("trainlog.json"), result.log.to_json_string())?;
    write_resolved(
        out,
        &ResolvedConfig {
            command: "train",
            precision: S::DTYPE.name(),
            data: Some(data.display().to_string()),
            n_classes: Some(n_classes),
            config: &cfg,
            extras: serde_json::json!({
                "best_epoch": result.log.best_epoch,
                "best_val_accuracy": result.log.best_val_accuracy,
                "freeze": {
                    "requested": result.freeze.requested,
                    "applied": result.freeze.applied,
                    "backbone_tensors": result.freeze.backbone_tensors,
                },
            }),
        },
    )?;
    println!(
        "trained {} epochs; best val accuracy {:.4} at epoch {}; outputs in {}",
        result.log.epochs.len(),
        result.log.best_val_accuracy,
        result.log.best_epoch,
        out.display()
    );
    Ok(())
}

fn pick_split(
    manifest: &DatasetManifest,
    split: SplitChoice,
    ratio: f64,
    seed: u64,
) -> Result<DatasetManifest, CliError> {
    match split {
        SplitChoice::All => Ok(manifest.clone()),
        SplitChoice::Train => Ok(stratified_split(manifest, ratio, seed)?.0),
        SplitChoice::Test => Ok(stratified_split(manifest, ratio, seed)?.1),
    }
}

fn split_name(split: SplitChoice) -> &'static str {
    match split {
        SplitChoice::Test => "test",
        SplitChoice::Train => "train",
        SplitChoice::All => "all",
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd<S: Scalar>(
    ckpt: &Path,
    data: &Path,
    out: Option<PathBuf>,
    split: SplitChoice,
    seed: Option<u64>,
    train_ratio: Option<f64>,
    batch_size: usize,
) -> Result<(), CliError> {
    let loaded = load_checkpoint::<S>(ckpt)?;
    let out_dir = out.unwrap_or_else(|| {
        ckpt.parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let (manifest, warnings) = load_directory(data)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if manifest.classes != loaded.classes {
        return Err(CliError::InvalidConfig(format!(
            "dataset classes {:?} do not match checkpoint classes {:?}",
            manifest.classes, loaded.classes
        )));
    }
    let ratio = train_ratio.unwrap_or(0.8);
    let split_seed = seed.unwrap_or(loaded.train_seed);
    let subset = pick_split(&manifest, split, ratio, split_seed)?;

    let report = evaluate(
        &loaded.model,
        &subset,
        &loaded.normalizer,
        &loaded.preprocess,
        batch_size,
    )?;

    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("eval.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut cm_csv = Vec::new();
    report
        .confusion
        .write_csv(&report.classes, &mut cm_csv)
        .map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(out_dir.join("confusion.csv"), &cm_csv)?;
    for (c, curve) in report.roc.per_class.iter().enumerate() {
        if let Some(curve) = curve {
            let mut buf = Vec::new();
            curve
                .write_csv(&mut buf)
                .map_err(|e| CliError::Other(e.to_string()))?;
            std::fs::write(
                out_dir.join(format!("roc_{}.csv", report.classes[c])),
                &buf,
            )?;
        }
    }
    let cfg = FileConfig::default();
    write_resolved(
        &out_dir,
        &ResolvedConfig {
            command: "eval",
            precision: S::DTYPE.name(),
            data: Some(data.display().to_string()),
            n_classes: Some(report.classes.len()),
            config: &cfg,
            extras: serde_json::json!({
                "checkpoint": ckpt.display().to_string(),
                "split": split_name(split),
                "split_seed": split_seed,
                "train_ratio": ratio,
                "batch_size": batch_size,
            }),
        },
    )?;
    println!(
        "evaluated {} samples: accuracy {:.4}, macro F1 {:.4}, macro AUC {:.4}; outputs in {}",
        report.n_samples,
        report.prf.accuracy,
        report.prf.macro_f1,
        report.roc.macro_auc,
        out_dir.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct BenchOutput {
    full_pipeline: Option<LatencyReport>,
    model_only: Option<LatencyReport>,
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd<S: Scalar>(
    ckpt: &Path,
    data: &Path,
    out: Option<PathBuf>,
    warmup: usize,
    iters: usize,
    scope: ScopeChoice,
    split: SplitChoice,
    seed: Option<u64>,
    train_ratio: Option<f64>,
) -> Result<(), CliError> {
    let loaded = load_checkpoint::<S>(ckpt)?;
    let out_dir = out.unwrap_or_else(|| {
        ckpt.parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let (manifest, _warnings) = load_directory(data)?;
    let ratio = train_ratio.unwrap_or(0.8);
    let split_seed = seed.unwrap_or(loaded.train_seed);
    let subset = pick_split(&manifest, split, ratio, split_seed)?;

    let mut samples: Vec<(RgbImage, RgbImage)> = Vec::new();
    for s in subset.samples.iter().take(iters.max(32)) {
        samples.push((s.vision.load()?, s.tactile.load()?));
    }

    let mut output = BenchOutput {
        full_pipeline: None,
        model_only: None,
    };
    if matches!(scope, ScopeChoice::Full | ScopeChoice::Both) {
        output.full_pipeline = Some(bench_inference(
            &loaded.model,
            &loaded.normalizer,
            &loaded.preprocess,
            &samples,
            warmup,
            iters,
            BenchScope::FullPipeline,
        )?);
    }
    if matches!(scope, ScopeChoice::Model | ScopeChoice::Both) {
        output.model_only = Some(bench_inference(
            &loaded.model,
            &loaded.normalizer,
            &loaded.preprocess,
            &samples,
            warmup,
            iters,
            BenchScope::ModelOnly,
        )?);
    }

    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("bench.json"),
        serde_json::to_string_pretty(&output).expect("bench output serializes"),
    )?;
    let cfg = FileConfig::default();
    write_resolved(
        &out_dir,
        &ResolvedConfig {
            command: "bench",
            precision: S::DTYPE.name(),
            data: Some(data.display().to_string()),
            n_classes: Some(manifest.classes.len()),
            config: &cfg,
            extras: serde_json::json!({
                "checkpoint": ckpt.display().to_string(),
                "warmup": warmup,
                "iters": iters,
                "split": split_name(split),
                "split_seed": split_seed,
            }),
        },
    )?;
    for (name, report) in [
        ("full-pipeline", &output.full_pipeline),
        ("model-only", &output.model_only),
    ] {
        if let Some(r) = report {
            println!(
                "{name}: total median {:.3} ms (vision {:.3}, tactile {:.3}, fuse {:.3})",
                r.total.median_ms,
                r.vision_branch.median_ms,
                r.tactile_branch.median_ms,
                r.fuse_and_predict.median_ms
            );
        }
    }
    println!("bench report written to {}", out_dir.join("bench.json").display());
    Ok(())
}

fn gradcheck_cmd(seed: u64, trials: usize) -> Result<(), CliError> {
    println!("finite-difference gradient suite (h=1e-5, 64-bit, {trials} trials per op)");
    let checks = check_all_primitives(seed, trials).map_err(CliError::from)?;
    let mut all_ok = true;
    for c in &checks {
        let ok = c.max_rel_err < 1e-4;
        all_ok &= ok;
        println!(
            "  {:<22} max rel err {:.3e} over {:>5} checks  [{}]",
            c.name,
            c.max_rel_err,
            c.checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let composed = composed_model_gradcheck(seed, trials).map_err(CliError::from)?;
    let composed_ok = composed < 1e-3;
    all_ok &= composed_ok;
    println!(
        "  {:<22} max rel err {:.3e}              [{}]",
        "composed model",
        composed,
        if composed_ok { "ok" } else { "FAIL" }
    );
    if all_ok {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(CliError::Other("gradient checks failed".into()))
    }
}
