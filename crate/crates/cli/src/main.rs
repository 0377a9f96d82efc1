//! `mpstan` — metapopulation epidemic forecasting pipeline.
//!
//! Subcommands: `ingest`, `train`, `forecast`, `evaluate`, `simulate`,
//! `ablate`. Settings come from an optional TOML config (`--config`);
//! command-line flags override file values. Log verbosity is controlled by
//! the `RUST_LOG` environment variable only.

/// Prints a line to stdout, ignoring write failures. Downstream consumers
/// such as `head` may close the pipe early; the on-disk artifacts are the
/// real output, so a vanished stdout must not abort the run.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use mpstan_core::artifacts::Checkpoint;

#[derive(Parser)]
#[command(
    name = "mpstan",
    version,
    about = "Metapopulation epidemic forecasting: ingest, train, forecast, evaluate, simulate, ablate"
)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output artifacts (default: current directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct DataArgs {
    /// Cases CSV: date,patch_id,active,recovered,susceptible.
    #[arg(long, value_name = "PATH")]
    pub cases: Option<PathBuf>,
    /// Patch metadata CSV: patch_id,name,population,latitude,longitude.
    #[arg(long, value_name = "PATH")]
    pub meta: Option<PathBuf>,
    /// Optional headerless NxN distance matrix (km) replacing great-circle
    /// distances.
    #[arg(long, value_name = "PATH")]
    pub distances: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Number of observed days fed to the model.
    #[arg(long)]
    pub t_in: Option<usize>,
    /// Forecast horizon in days.
    #[arg(long)]
    pub t_out: Option<usize>,
    /// Recurrent state width.
    #[arg(long)]
    pub d_gru: Option<usize>,
    /// Spatial embedding width.
    #[arg(long)]
    pub d_gat: Option<usize>,
    /// Number of attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Global-norm gradient clip.
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    over: TrainOverrides,
    /// Ablation variant: full, phy-all-off, phy-loss-off, phy-model-off,
    /// mobility-off, mpg-off.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint JSON.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint JSON.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Also fit and score the per-patch compartmental baseline.
    #[arg(long)]
    sir_baseline: bool,
    /// Write a per-day series CSV for this patch id (repeatable).
    #[arg(long = "emit-series", value_name = "PATCH_ID")]
    emit_series: Vec<String>,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Infection rate.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Recovery rate.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Susceptible mobility rate.
    #[arg(long)]
    pub d_s: Option<f64>,
    /// Infected mobility rate.
    #[arg(long)]
    pub d_i: Option<f64>,
    /// Recovered mobility rate.
    #[arg(long)]
    pub d_r: Option<f64>,
    /// Days to simulate.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Infected seeded per patch when no cases CSV is given.
    #[arg(long)]
    pub initial_infected: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    over: TrainOverrides,
}

#[derive(Subcommand)]
enum Command {
    /// Read raw CSVs into a snapshot plus summary statistics.
    Ingest(IngestArgs),
    /// Train a model; writes checkpoint.json and history.json.
    Train(TrainArgs),
    /// Forecast the days following the dataset's end.
    Forecast(ForecastArgs),
    /// Score a checkpoint on the chronological test span.
    Evaluate(EvaluateArgs),
    /// Roll the mechanistic dynamics forward with fixed rates.
    Simulate(SimulateArgs),
    /// Train and evaluate every ablation variant on the same data.
    Ablate(AblateArgs),
}

fn run(cli: Cli) -> Result<()> {
    let file = config::load_file_config(cli.config.as_deref())?;
    let out_dir = commands::resolve_out(cli.out.as_ref(), &file);
    match &cli.command {
        Command::Ingest(args) => {
            let inputs = commands::load_inputs(&file, &args.data)?;
            commands::cmd_ingest(&out_dir, &inputs)
        }
        Command::Train(args) => {
            let inputs = commands::load_inputs(&file, &args.data)?;
            let (cfg, dims) = commands::resolve_train_config(
                &file,
                &args.over,
                args.ablation.as_deref(),
                cli.seed,
            )?;
            let hyper = commands::resolve_hyper(&file);
            commands::cmd_train(&out_dir, &inputs, &dims, &cfg, &hyper)
        }
        Command::Forecast(args) => {
            let inputs = commands::load_inputs(&file, &args.data)?;
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            commands::cmd_forecast(&out_dir, &inputs, &ckpt)
        }
        Command::Evaluate(args) => {
            let inputs = commands::load_inputs(&file, &args.data)?;
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            commands::cmd_evaluate(
                &out_dir,
                &inputs,
                &ckpt,
                args.sir_baseline,
                &args.emit_series,
            )
        }
        Command::Simulate(args) => commands::cmd_simulate(&out_dir, &file, args),
        Command::Ablate(args) => {
            let inputs = commands::load_inputs(&file, &args.data)?;
            let (cfg, dims) =
                commands::resolve_train_config(&file, &args.over, None, cli.seed)?;
            let hyper = commands::resolve_hyper(&file);
            commands::cmd_ablate(&out_dir, &inputs, &dims, &cfg, &hyper)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
