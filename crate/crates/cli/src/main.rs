mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Synthetic flight data, latent physics probe, alignment metrics and a
/// probe-regularized toy generator.
#[derive(Debug, Parser)]
#[command(name = "aerokit", version)]
struct Cli {
    /// Worker threads for per-clip work. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset of clip directories.
    SynthGen(SynthGenArgs),
    /// Train the latent physics probe.
    ProbeTrain(ProbeTrainArgs),
    /// Per-axis probe accuracy against majority and random baselines.
    ProbeEval(ProbeEvalArgs),
    /// AAS and PCR of ground-truth latents, optionally with Flow-IMU r.
    Eval(EvalArgs),
    /// Fit the Flow-IMU ridge evaluator.
    FlowImuFit(FlowImuFitArgs),
    /// Per-axis Pearson r of a Flow-IMU model on a dataset.
    FlowImuEval(FlowImuEvalArgs),
    /// Train the action-conditioned latent generator.
    GenTrain(GenTrainArgs),
    /// Score generator rollouts with the frozen probe.
    GenEval(GenEvalArgs),
    /// Compare metric reports side by side.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 33)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ProbeTrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Axis ranges; fitted on the training split and written here if absent.
    #[arg(long)]
    ranges: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of clips (last by id) held out for checkpoint selection.
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Six independent trunks instead of a shared one.
    #[arg(long)]
    separate_trunks: bool,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeEvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    ranges: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only the last fraction of clips (the probe-train split).
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    ranges: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    flow_imu: Option<PathBuf>,
    /// Evaluate temporally shuffled clips (seeded frame permutation).
    #[arg(long)]
    shuffle_frames: Option<u64>,
    #[arg(long, default_value = "ground-truth")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FlowImuFitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Choose λ by grouped 5-fold cross-validation instead.
    #[arg(long)]
    auto_lambda: bool,
    /// Use only the current pair's flow features.
    #[arg(long)]
    no_temporal_context: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FlowImuEvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Control run: permute targets across frame pairs with this seed.
    #[arg(long)]
    shuffle_pairs: Option<u64>,
}

#[derive(Debug, Args)]
struct GenTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    ranges: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    lambda_phys: f32,
    #[arg(long, default_value_t = 500)]
    warmup: usize,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenEvalArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    ranges: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    method: Option<String>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn init_logging() {
    let level = match std::env::var("AEROKIT_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    if let Some(n) = cli.workers {
        if let Err(msg) = aerokit::par::set_workers(n) {
            eprintln!("error: usage: --workers: {msg}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
