//! `tssam`: train, evaluate and audit the side-network segmentation model.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unexpected internal failure |
//! | 2 | usage error (bad or missing flags) |
//! | 3 | checkpoint cannot be read or does not fit the model |
//! | 4 | invalid configuration |
//! | 5 | unusable data (missing pairs, bad images, wrong sizes) |
//! | 6 | numeric failure (non-finite loss or gradient) |
//! | 7 | gradient check failed |
//! | 8 | output could not be written |

mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use manifest::RunManifest;
use tssam_core::data::{self, Difficulty, SegSample};
use tssam_core::losses::LossKind;
use tssam_core::model::TsSam;
use tssam_core::params::{read_header, CountFilter, ParamStore};
use tssam_core::trainer::{self, GradCheckConfig, RunConfig, Task};
use tssam_core::{DType, Error, Float};

/// Failure class attached as context; decides the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Checkpoint,
    Config,
    Data,
    GradCheck,
    Output,
}

impl Class {
    fn code(self) -> u8 {
        match self {
            Class::Checkpoint => 3,
            Class::Config => 4,
            Class::Data => 5,
            Class::GradCheck => 7,
            Class::Output => 8,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Class::Checkpoint => "checkpoint error",
            Class::Config => "configuration error",
            Class::Data => "data error",
            Class::GradCheck => "gradient check failed",
            Class::Output => "cannot write output",
        };
        f.write_str(s)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(c) = err.downcast_ref::<Class>() {
        return c.code();
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Checkpoint(_) => 3,
                Error::Config(_) | Error::Json(_) => 4,
                Error::Data(_) | Error::Image { .. } | Error::Validation(_) | Error::Shape(_) => 5,
                Error::Numeric(_) => 6,
                Error::Io { .. } => 8,
                Error::UndefinedMetric(_) => 1,
            };
        }
    }
    1
}

#[derive(Parser)]
#[command(name = "tssam", version, about = "Side-network segmentation over a frozen ViT backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the adapter, refinement module and decoder.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an image/mask folder pair.
    Eval(EvalArgs),
    /// Finite-difference audit of every trainable tensor.
    Gradcheck(GradcheckArgs),
    /// Exact parameter counts with a per-module breakdown.
    CountParams(CountArgs),
    /// Write a synthetic dataset folder.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    /// Training images; without `--images/--masks` a synthetic set is generated.
    #[arg(long, requires = "masks")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    masks: Option<PathBuf>,
    /// Size of the generated synthetic set.
    #[arg(long, default_value_t = 8)]
    synthetic: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 3)]
    samples_per_group: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    config: PathBuf,
    /// all, trainable or frozen
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    /// `S` or `HxW`.
    #[arg(long, default_value = "64")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "low")]
    difficulty: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = threads().and_then(|_| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::CountParams(a) => cmd_count_params(a),
        Command::Synth(a) => cmd_synth(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The kernels run on one thread, so any positive cap is already honoured.
fn threads() -> Result<()> {
    if let Ok(v) = std::env::var("TSSAM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => log::debug!("TSSAM_THREADS={n}; kernels are single-threaded"),
            _ => return Err(anyhow::anyhow!("TSSAM_THREADS must be a positive integer, got `{v}`").context(Class::Config)),
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)
        .with_context(|| format!("loading {}", path.display()))
        .context(Class::Config)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parse = |t: &str| t.trim().parse::<usize>().with_context(|| format!("invalid size `{s}`"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let v = parse(s)?;
            Ok((v, v))
        }
    }
}

/// Loads a folder pair and resizes every sample to the model input size.
fn load_samples(images: &Path, masks: &Path, size: [usize; 2]) -> Result<Vec<SegSample>> {
    let load = data::load_folder(images, masks).context(Class::Data)?;
    for w in &load.warnings {
        warn!("{w}");
    }
    load.samples
        .iter()
        .map(|s| data::resize_sample(s, (size[0], size[1])))
        .collect::<tssam_core::Result<Vec<_>>>()
        .context(Class::Data)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = Utc::now();
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(task) = &a.task {
        cfg.train.task = task.parse::<Task>().context(Class::Config)?;
    }
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .context(Class::Output)?;

    let samples = match (&a.images, &a.masks) {
        (Some(i), Some(m)) => load_samples(i, m, cfg.model.image_size)?,
        _ => {
            let [h, w] = cfg.model.image_size;
            info!("no data folders given; generating {} synthetic samples", a.synthetic);
            data::generate_synthetic(a.synthetic, (h, w), cfg.train.seed, Difficulty::Low).context(Class::Data)?
        }
    };

    let (model, store) = TsSam::build::<f32>(cfg.model.clone()).context(Class::Config)?;
    let counts = model.count_breakdown();
    info!(
        "{} samples, {} trainable / {} frozen parameters, {} epochs",
        samples.len(),
        counts.trainable(),
        counts.backbone,
        cfg.train.epochs()
    );
    write_text(&a.out.join("config.json"), &(cfg.to_json() + "\n"))?;

    let mut outcome = Ok(());
    if cfg.train.grad_check {
        outcome = pre_train_grad_check(&model, &store, &samples, &cfg);
    }
    if outcome.is_ok() {
        outcome = run_training(&model, store, &samples, &cfg, &a.out);
    }

    let manifest = RunManifest {
        command: "train".into(),
        args: std::env::args().skip(1).collect(),
        config_path: Some(a.config.display().to_string()),
        seed: cfg.train.seed,
        artifacts: RunManifest::collect_artifacts(&a.out, "manifest.json").context(Class::Output)?,
        started_at: manifest::timestamp(started),
        finished_at: manifest::timestamp(Utc::now()),
        status: if outcome.is_ok() { "ok" } else { "failed" }.into(),
        error: outcome.as_ref().err().map(|e| format!("{e:#}")),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    manifest.write(&a.out.join("manifest.json")).context(Class::Output)?;
    outcome
}

fn pre_train_grad_check(model: &TsSam, store: &ParamStore<f32>, samples: &[SegSample], cfg: &RunConfig) -> Result<()> {
    let idx: Vec<usize> = (0..samples.len().min(2)).collect();
    let inputs: Vec<_> = idx
        .iter()
        .map(|&i| trainer::model_input(&samples[i], cfg.train.task, cfg.train.hf_mask_ratio))
        .collect::<tssam_core::Result<_>>()?;
    let (_, masks) = data::batch(samples, &idx)?;
    let images = tssam_core::Tensor::stack(&inputs)?;
    let report = trainer::grad_check(
        model,
        &store.cast(),
        &images.cast(),
        &masks.cast(),
        cfg.train.task.loss(),
        &GradCheckConfig::default(),
    )?;
    info!("pre-training gradient check: max relative error {:.3e}", report.max_rel_error());
    if !report.pass {
        return Err(anyhow::anyhow!("pre-training gradient check failed").context(Class::GradCheck));
    }
    Ok(())
}

fn run_training(model: &TsSam, store: ParamStore<f32>, samples: &[SegSample], cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt_dir = out.join("checkpoints");
    let result = trainer::train(model, store, samples, &cfg.train, Some(&ckpt_dir))?;
    write_text(&out.join("train_log.ndjson"), &result.log.to_ndjson())?;
    let path = out.join("model.ckpt");
    result
        .store
        .save_checkpoint(&path)
        .context(Class::Output)?;
    if let Some(trainer::LogRecord::Final { loss, .. }) = result.log.final_record() {
        info!("{} steps; final training loss {:.6}", result.total_steps, loss.total);
    }
    info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .context(Class::Output)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let config_path = match &a.config {
        Some(p) => p.clone(),
        None => a.ckpt.with_file_name("config.json"),
    };
    if !config_path.is_file() {
        bail!(anyhow::anyhow!(
            "no model config: pass --config or place config.json next to {}",
            a.ckpt.display()
        )
        .context(Class::Config));
    }
    let cfg = load_config(&config_path)?;
    let bytes = std::fs::read(&a.ckpt)
        .with_context(|| format!("reading {}", a.ckpt.display()))
        .context(Class::Checkpoint)?;
    let dtype = read_header(&bytes)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", a.ckpt.display()))
        .context(Class::Checkpoint)?
        .dtype;
    let samples = load_samples(&a.images, &a.masks, cfg.model.image_size)?;
    let evaluation = match dtype {
        DType::F32 => evaluate::<f32>(&cfg, &bytes, &samples)?,
        DType::F64 => evaluate::<f64>(&cfg, &bytes, &samples)?,
    };
    let report = evaluation.report;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).context(Class::Output)?;
    }
    write_text(&a.report, &report.to_json())?;
    print!("{}", report.to_table());
    if !evaluation.fbeta_excluded.is_empty() {
        warn!("weighted F-beta excludes {:?}", evaluation.fbeta_excluded);
    }
    Ok(())
}

fn evaluate<T: Float>(
    cfg: &RunConfig,
    bytes: &[u8],
    samples: &[SegSample],
) -> Result<tssam_core::metrics::DatasetEvaluation> {
    let store = ParamStore::<T>::from_checkpoint_bytes(bytes)
        .map_err(Error::from)
        .context(Class::Checkpoint)?;
    let model = TsSam::new(cfg.model.clone()).context(Class::Config)?;
    model.check_store(&store).context(Class::Checkpoint)?;
    Ok(trainer::evaluate(&model, &store, samples, cfg.train.task, cfg.train.hf_mask_ratio)?)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (model, store) = TsSam::build::<f64>(cfg.model.clone()).context(Class::Config)?;
    let [h, w] = cfg.model.image_size;
    let samples = data::generate_synthetic(2, (h, w), cfg.train.seed, Difficulty::Low).context(Class::Data)?;
    let inputs: Vec<_> = samples
        .iter()
        .map(|s| trainer::model_input(s, cfg.train.task, cfg.train.hf_mask_ratio))
        .collect::<tssam_core::Result<_>>()?;
    let images = tssam_core::Tensor::stack(&inputs)?.cast::<f64>();
    let (_, masks) = data::batch(&samples, &[0, 1])?;
    let gc = GradCheckConfig {
        samples_per_group: a.samples_per_group,
        seed: a.seed,
        ..Default::default()
    };
    let mut all_pass = true;
    for loss in [LossKind::BceIou, LossKind::Bbce] {
        let report = trainer::grad_check(&model, &store, &images, &masks.cast(), loss, &gc)?;
        println!("loss {loss:?}: tolerance {:e}", report.tolerance);
        for g in &report.groups {
            println!(
                "{} {:<44} checked {:>2} skipped {:>2} max rel {:.3e}",
                if g.pass { "PASS" } else { "FAIL" },
                g.name,
                g.checked,
                g.nonsmooth,
                g.max_rel_error
            );
        }
        println!(
            "{} {loss:?}: {} groups, max relative error {:.3e}",
            if report.pass { "PASS" } else { "FAIL" },
            report.groups.len(),
            report.max_rel_error()
        );
        all_pass &= report.pass;
    }
    if !all_pass {
        return Err(anyhow::anyhow!("one or more parameter groups exceed the tolerance").context(Class::GradCheck));
    }
    Ok(())
}

fn cmd_count_params(a: CountArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (model, store) = TsSam::build::<f32>(cfg.model).context(Class::Config)?;
    let filters = match &a.filter {
        Some(f) => vec![f.parse::<CountFilter>().context(Class::Config)?],
        None => vec![CountFilter::Trainable, CountFilter::Frozen, CountFilter::All],
    };
    let name = |f: CountFilter| match f {
        CountFilter::All => "all",
        CountFilter::Trainable => "trainable",
        CountFilter::Frozen => "frozen",
    };
    let mut header = format!("{:<10}", "module");
    for &f in &filters {
        header.push_str(&format!(" {:>10}", name(f)));
    }
    println!("{header}");
    for m in store.modules() {
        let mut row = format!("{m:<10}");
        for &f in &filters {
            row.push_str(&format!(" {:>10}", store.count_prefix(&format!("{m}."), f)));
        }
        println!("{row}");
    }
    let mut row = format!("{:<10}", "total");
    for &f in &filters {
        row.push_str(&format!(" {:>10}", store.count(f)));
    }
    println!("{row}");

    let closed = model.count_breakdown();
    if closed.trainable() != store.count(CountFilter::Trainable) || closed.all() != store.count(CountFilter::All) {
        bail!("closed-form counts disagree with the allocated parameters");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let size = parse_size(&a.size).context(Class::Config)?;
    let difficulty = a.difficulty.parse::<Difficulty>().context(Class::Config)?;
    if a.n == 0 {
        bail!(anyhow::anyhow!("--n must be positive").context(Class::Config));
    }
    let samples = data::generate_synthetic(a.n, size, a.seed, difficulty).context(Class::Config)?;
    let manifest = data::write_synthetic(&a.out, &samples, a.seed, difficulty).context(Class::Output)?;
    println!(
        "wrote {} samples of {}x{} to {}",
        manifest.n,
        size.0,
        size.1,
        a.out.display()
    );
    Ok(())
}
