//! `shardkrp` command-line front end.

mod commands;
mod output;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shardkrp::partition::PartitionConfig;
use shardkrp::{Accumulation, PlatformConfig, Scheduling, Strategy, Timing};
use std::path::PathBuf;
use std::process::ExitCode;

/// Sharded multi-device sparse MTTKRP on simulated worker groups.
#[derive(Debug, Parser)]
#[command(name = "shardkrp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print shape, nonzero count, density and per-mode index counts.
    Info(InfoArgs),
    /// Generate a synthetic `.tns` tensor.
    Synth(SynthArgs),
    /// Build and cache one partition plan per mode.
    Partition(PartitionArgs),
    /// Run MTTKRP over every mode and report metrics.
    Mttkrp(MttkrpArgs),
    /// Compare engine compute time across device counts.
    Scaling(ScalingArgs),
    /// Report per-device compute time and the imbalance percentage.
    Imbalance(ImbalanceArgs),
    /// CP decomposition by alternating least squares.
    Cpd(CpdArgs),
}

#[derive(Debug, Args)]
struct InfoArgs {
    tensor: PathBuf,
    /// Emit one JSON object instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DistArg {
    Uniform,
    Zipf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ValuesArg {
    Uniform,
    Ones,
    Normal,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Mode lengths, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    shape: Vec<u64>,
    #[arg(long)]
    nnz: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    dist: DistArg,
    /// Zipf exponent.
    #[arg(long, default_value_t = 1.2)]
    exponent: f64,
    #[arg(long, value_enum, default_value = "uniform")]
    values: ValuesArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination `.tns` file.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TimingArg {
    Concurrent,
    Isolated,
}

/// Options shared by every verb that runs the engine.
#[derive(Debug, Args)]
struct EngineArgs {
    /// Workers per device.
    #[arg(long, env = "SHARDKRP_WORKERS", default_value_t = 4)]
    workers: usize,
    /// Shards per worker (`k = devices * oversub`).
    #[arg(long, default_value_t = 4)]
    oversub: usize,
    /// Nonzeros per inter-shard partition.
    #[arg(long, default_value_t = 8192)]
    isp_capacity: usize,
    #[arg(long, default_value = "equal-index", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Assign contiguous shard blocks to devices instead of a shared queue.
    #[arg(long = "static")]
    static_assignment: bool,
    /// Accumulate with atomic adds instead of the ordered per-partition merge.
    #[arg(long)]
    atomic: bool,
    #[arg(long, value_enum)]
    timing: Option<TimingArg>,
    /// Nonzeros per worker step.
    #[arg(long, default_value_t = 32)]
    column_width: usize,
    /// Metrics destination (JSON lines); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

impl EngineArgs {
    fn partition(&self, devices: usize) -> PartitionConfig {
        PartitionConfig {
            devices,
            workers_per_device: self.workers,
            oversubscription: self.oversub,
            isp_capacity: self.isp_capacity,
            strategy: self.strategy,
        }
    }

    fn platform(&self, devices: usize, rank: usize, default_timing: Timing) -> PlatformConfig {
        PlatformConfig {
            devices,
            workers_per_device: self.workers,
            column_width: self.column_width,
            rank,
            accumulation: if self.atomic {
                Accumulation::Atomic
            } else {
                Accumulation::Deterministic
            },
            scheduling: if self.static_assignment {
                Scheduling::Static
            } else {
                Scheduling::Dynamic
            },
            timing: match self.timing {
                Some(TimingArg::Concurrent) => Timing::Concurrent,
                Some(TimingArg::Isolated) => Timing::Isolated,
                None => default_timing,
            },
            instrument: false,
        }
    }
}

#[derive(Debug, Args)]
struct PartitionArgs {
    tensor: PathBuf,
    /// Directory for the per-mode plan files.
    #[arg(long)]
    cache_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    devices: usize,
    /// Rebuild even when valid cached plans exist.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, default_value_t = 32)]
    rank: usize,
    /// Measured repetitions.
    #[arg(long, default_value_t = 1)]
    iterations: usize,
    /// Unreported repetitions run first.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Seed for the random factor matrices.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct MttkrpArgs {
    tensor: PathBuf,
    /// Use cached plans from this directory (see `partition`).
    #[arg(long)]
    plans: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    devices: usize,
    /// Check every mode against the sequential oracle.
    #[arg(long)]
    verify: bool,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Args)]
struct ScalingArgs {
    tensor: PathBuf,
    /// Device counts to compare; must include 1.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    devices: Vec<usize>,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Args)]
struct ImbalanceArgs {
    tensor: PathBuf,
    #[arg(long, default_value_t = 4)]
    devices: usize,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Args)]
struct CpdArgs {
    tensor: PathBuf,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 25)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop when the fit changes by less than this.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 4)]
    devices: usize,
    /// Write factor matrices and weights as CSV here.
    #[arg(long)]
    factors_dir: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Info(a) => commands::info(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Partition(a) => commands::partition(&a),
        Command::Mttkrp(a) => commands::mttkrp(&a),
        Command::Scaling(a) => commands::scaling(&a),
        Command::Imbalance(a) => commands::imbalance(&a),
        Command::Cpd(a) => commands::cpd(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shardkrp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
