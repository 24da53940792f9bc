//! Command-line front end: dataset generation, curriculum training,
//! evaluation, the ablation/comparison harnesses, kernel analysis, and
//! the inference benchmark.
//!
//! Exit codes: 0 success, 1 usage or bad configuration, 2 file I/O or
//! format problems, 3 numeric failure (non-finite loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pidcnn::error::{Error, Result};
use pidcnn::eval::{
    ablate_residual, benchmark_inference, compare_nonlinearity, compare_pooling, evaluate,
    render_bench_inputs,
};
use pidcnn::network::{
    load_checkpoint, transfer_weights, LoadedCheckpoint, NetworkConfig, Nonlinearity,
    Pooling,
};
use pidcnn::pid::{analyze_kernel_3x3, report_to_csv, KernelReportRow};
use pidcnn::scene::{build_rig, generate_dataset, read_dataset, Dataset, DEFAULT_HALF_EXTENT};
use pidcnn::training::{
    default_initial_lr, train_stage, LrSchedule, ResumePoint, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "pidcnn",
    version,
    about = "Binocular ball-state measurement with a feature-reuse CNN",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic binocular dataset to a .pidb file.
    GenData(GenDataArgs),
    /// Train one curriculum stage.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write the error-statistics CSV.
    Eval(EvalArgs),
    /// Score with and without the residual head corrections.
    Ablate(AblateArgs),
    /// Train two arms (pooling or nonlinearity) from identical weights.
    Compare(CompareArgs),
    /// Decompose every 3x3 convolution kernel into PID coefficients.
    AnalyzeKernels(AnalyzeArgs),
    /// Time single-sample inference on pre-rendered inputs.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of records to render.
    #[arg(long)]
    count: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Camera window half-extent in world units.
    #[arg(long, default_value_t = DEFAULT_HALF_EXTENT)]
    half_extent: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Curriculum stage: 1 (coordinates), 2 (+velocities), 3 (+acceleration).
    #[arg(long)]
    stage: u32,
    /// Training dataset (.pidb).
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset (.pidb).
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint to grow from (previous stage) or resume (same stage).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint output path, rewritten every epoch.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (default: the checkpoint path with .metrics.csv).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    epochs: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Initial learning rate (default 1e-3 for stage 1, 1e-6 after).
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate schedule: compound or reset-cycle.
    #[arg(long, default_value = "compound")]
    schedule: String,
    /// Downsampling flavor: avg or max.
    #[arg(long)]
    pooling: Option<String>,
    /// Activation: prelu or relu.
    #[arg(long)]
    nonlinearity: Option<String>,
    /// Accepted for compatibility; runs are single-threaded and
    /// bit-reproducible either way.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Error-statistics CSV output.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Paired statistics CSV (arm column: residual / no-residual).
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Which design axis to compare: pooling or nonlinearity.
    #[arg(long)]
    what: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Aligned loss-curve CSV output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    lr: Option<f64>,
    /// Fixed pooling while comparing nonlinearities.
    #[arg(long, default_value = "avg")]
    pooling: String,
    /// Fixed activation while comparing poolings.
    #[arg(long, default_value = "prelu")]
    nonlinearity: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Kernel-decomposition CSV output.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset supplying pre-rendered inputs.
    #[arg(long)]
    data: PathBuf,
    /// Number of timed measurements.
    #[arg(long, default_value_t = 1024)]
    count: usize,
    /// Untimed warmup passes.
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional metric,value CSV output.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Config(_) => 1,
                Error::Io { .. } | Error::Format { .. } => 2,
                Error::NonFiniteLoss { .. } => 3,
                _ => 2,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::AnalyzeKernels(args) => cmd_analyze(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn parse_pooling(s: &str) -> Result<Pooling> {
    match s {
        "avg" | "average" => Ok(Pooling::Average),
        "max" => Ok(Pooling::Max),
        other => Err(Error::Config(format!(
            "unknown pooling {other:?} (expected avg or max)"
        ))),
    }
}

fn parse_nonlinearity(s: &str) -> Result<Nonlinearity> {
    match s {
        "prelu" => Ok(Nonlinearity::Prelu),
        "relu" => Ok(Nonlinearity::Relu),
        other => Err(Error::Config(format!(
            "unknown nonlinearity {other:?} (expected prelu or relu)"
        ))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path)
}

/// Image size recorded in a dataset header (datasets are square).
fn dataset_size(dataset: &Dataset) -> usize {
    dataset.header.height as usize
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let rig = build_rig(args.size, args.half_extent)?;
    generate_dataset(args.count, args.seed, &rig, &args.out)?;
    let bytes = std::fs::metadata(&args.out)
        .map_err(|e| Error::io(&args.out, e))?
        .len();
    println!(
        "wrote {} records ({} views, {}x{} px, seed {}) to {} ({bytes} bytes)",
        args.count,
        2,
        args.size,
        args.size,
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let train = load_dataset(&args.data)?;
    let val = load_dataset(&args.val)?;
    let frames = args.stage as usize;
    let size = dataset_size(&train);
    if dataset_size(&val) != size {
        return Err(Error::Config(format!(
            "training images are {size} px but validation images are {} px",
            dataset_size(&val)
        )));
    }

    let init = match &args.init {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let mut net = NetworkConfig::for_image_size(size, frames)?;
    // Inherit the architectural choices from the initial checkpoint;
    // explicit flags must agree with it.
    if let Some(ck) = &init {
        net.pooling = ck.weights.config.pooling;
        net.nonlinearity = ck.weights.config.nonlinearity;
    }
    if let Some(p) = &args.pooling {
        let chosen = parse_pooling(p)?;
        if init.is_some() && chosen != net.pooling {
            return Err(Error::Config(
                "requested pooling conflicts with the initial checkpoint".to_string(),
            ));
        }
        net.pooling = chosen;
    }
    if let Some(nl) = &args.nonlinearity {
        let chosen = parse_nonlinearity(nl)?;
        if init.is_some() && chosen != net.nonlinearity {
            return Err(Error::Config(
                "requested nonlinearity conflicts with the initial checkpoint".to_string(),
            ));
        }
        net.nonlinearity = chosen;
    }

    let resume = match init {
        None => {
            if args.stage > 1 {
                return Err(Error::Config(format!(
                    "stage {} needs --init with the previous stage's checkpoint",
                    args.stage
                )));
            }
            None
        }
        Some(LoadedCheckpoint {
            weights,
            adam,
            epoch,
            stage,
        }) => {
            let same_base = NetworkConfig {
                frames: 1,
                ..weights.config
            } == NetworkConfig { frames: 1, ..net };
            if !same_base {
                return Err(Error::Config(format!(
                    "checkpoint architecture {:?} does not match the {size}-px dataset",
                    weights.config
                )));
            }
            if weights.config.frames == frames {
                if stage != args.stage {
                    return Err(Error::Config(format!(
                        "checkpoint is from stage {stage}, cannot resume stage {}",
                        args.stage
                    )));
                }
                println!(
                    "resuming stage {} from {} at epoch {epoch}",
                    args.stage,
                    args.init.as_ref().unwrap().display()
                );
                Some(ResumePoint {
                    weights,
                    adam,
                    start_epoch: epoch,
                })
            } else if weights.config.frames + 1 == frames {
                println!(
                    "growing stage-{stage} weights to {frames} frames (fresh residual head)"
                );
                Some(ResumePoint {
                    weights: transfer_weights(&weights, frames)?,
                    adam: None,
                    start_epoch: 0,
                })
            } else {
                return Err(Error::Config(format!(
                    "checkpoint covers {} frame(s); stage {} needs {} or {}",
                    weights.config.frames,
                    args.stage,
                    frames - 1,
                    frames
                )));
            }
        }
    };

    let cfg = TrainConfig {
        stage: args.stage,
        epochs: args.epochs,
        batch_size: args.batch_size,
        initial_lr: args.lr.unwrap_or_else(|| default_initial_lr(args.stage)),
        schedule: LrSchedule::parse(&args.schedule)?,
        seed: args.seed,
        net,
        adam: Default::default(),
        checkpoint_out: Some(args.out.clone()),
    };
    let (weights, log) = train_stage(&cfg, &train, &val, resume)?;

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("metrics.csv"));
    write_text(&metrics_path, &log.to_csv())?;

    if let (Some(last_step), Some(last_epoch)) = (log.steps.last(), log.epochs.last()) {
        println!(
            "stage {} done: {} steps, train loss {:.6}, val loss {:.6}, val error std {:.4} wu",
            args.stage, last_step.step, last_step.loss, last_epoch.val_loss, last_epoch.val_std
        );
    } else {
        println!("stage {} done: no epochs requested", args.stage);
    }
    println!(
        "checkpoint: {} ({} trainable parameters); metrics: {}",
        args.out.display(),
        weights.count_parameters(),
        metrics_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut weights = load_checkpoint(&args.ckpt)?.weights;
    let data = load_dataset(&args.data)?;
    let report = evaluate(&mut weights, &data, args.seed, args.batch_size)?;
    write_text(&args.report, &report.to_csv())?;
    for row in report.rows.iter().filter(|r| r.axis == "all") {
        println!(
            "{:<12} std {:.6} wu, max {:.6} wu, mean {:+.6} wu (n = {})",
            row.quantity, row.std, row.max, row.mean, row.n
        );
    }
    println!(
        "{:.3} ms per measurement; report: {}",
        report.ms_per_measurement,
        args.report.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut weights = load_checkpoint(&args.ckpt)?.weights;
    if weights.config.frames < 2 {
        return Err(Error::Config(
            "the residual ablation needs a stage-2 or stage-3 checkpoint".to_string(),
        ));
    }
    let data = load_dataset(&args.data)?;
    let report = ablate_residual(&mut weights, &data, args.seed, args.batch_size)?;
    write_text(&args.report, &report.to_csv())?;
    for (quantity, delta) in report.reductions() {
        println!(
            "{quantity:<12} residual changes pooled std by {:+.2}%",
            -delta * 100.0
        );
    }
    println!("report: {}", args.report.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let train = load_dataset(&args.data)?;
    let val = load_dataset(&args.val)?;
    let mut net = NetworkConfig::for_image_size(dataset_size(&train), 1)?;
    net.pooling = parse_pooling(&args.pooling)?;
    net.nonlinearity = parse_nonlinearity(&args.nonlinearity)?;
    let base = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        initial_lr: args.lr.unwrap_or_else(|| default_initial_lr(1)),
        ..TrainConfig::new(1, net, args.seed)
    };
    let report = match args.what.as_str() {
        "pooling" => compare_pooling(&base, &train, &val)?,
        "nonlinearity" => compare_nonlinearity(&base, &train, &val)?,
        other => {
            return Err(Error::Config(format!(
                "unknown comparison {other:?} (expected pooling or nonlinearity)"
            )))
        }
    };
    write_text(&args.out, &report.to_csv())?;
    println!(
        "arms start from identical weights: {}",
        report.init_fingerprints.windows(2).all(|w| w[0] == w[1])
    );
    for (name, log) in &report.arms {
        if let Some(last) = log.steps.last() {
            println!("{name:<10} final train loss {:.6} after {} steps", last.loss, last.step);
        }
    }
    println!("curves: {}", args.out.display());
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let weights = load_checkpoint(&args.ckpt)?.weights;
    let mut rows: Vec<KernelReportRow> = Vec::new();
    for k in 1..=weights.config.n_blocks {
        for half in ["1", "2"] {
            let name = format!("block{k}.conv{half}.weight");
            let w = weights.store.get(&name)?;
            let c_out = w.shape()[0];
            let c_in = w.shape()[1];
            for co in 0..c_out {
                for ci in 0..c_in {
                    let base = (co * c_in + ci) * 9;
                    let mut taps = [0.0f64; 9];
                    for (t, v) in taps.iter_mut().zip(&w.data()[base..base + 9]) {
                        *t = *v as f64;
                    }
                    rows.extend(analyze_kernel_3x3(&name, co, ci, &taps));
                }
            }
        }
    }
    write_text(&args.report, &report_to_csv(&rows))?;
    println!(
        "decomposed {} kernel slices from {} conv layers into {}",
        rows.len(),
        2 * weights.config.n_blocks,
        args.report.display()
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut weights = load_checkpoint(&args.ckpt)?.weights;
    let data = load_dataset(&args.data)?;
    let frames = weights.config.frames;
    let inputs = render_bench_inputs(&data, args.seed, frames, args.count)?;
    let report = benchmark_inference(&mut weights, &inputs, args.warmup)?;
    println!(
        "mean {:.3} ms, p95 {:.3} ms, {:.1} measurements/s over {} runs",
        report.mean_ms, report.p95_ms, report.throughput_per_s, report.n
    );
    if let Some(path) = &args.report {
        let csv = format!(
            "metric,value\nmean_ms,{}\np95_ms,{}\nthroughput_per_s,{}\nn,{}\n",
            report.mean_ms, report.p95_ms, report.throughput_per_s, report.n
        );
        write_text(path, &csv)?;
        println!("report: {}", path.display());
    }
    Ok(())
}
