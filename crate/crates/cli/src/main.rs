//! `ogmm`: streaming GMM estimation, specification tests and Monte Carlo
//! experiments from the command line.

mod commands;
mod error;
mod input;
mod models;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ogmm", version, about = "Streaming GMM estimation, testing and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated observations as CSV.
    Simulate(SimulateArgs),
    /// Estimate a model over a stream of batches read from CSV.
    Estimate(EstimateArgs),
    /// Over-identification and anomaly tests over a stream of batches.
    Test(TestArgs),
    /// Run a Monte Carlo experiment described by a TOML file.
    Bench(BenchArgs),
    /// Resume a saved OGMM state on new batches.
    Replay(ReplayArgs),
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    /// ols, iv, quantile, or a simulation model m1..m8.
    #[arg(long)]
    pub model: String,
    /// Misspecification parameter of models 3, 4, 7, 8.
    #[arg(long)]
    pub theta2: Option<f64>,
    /// Quantile level of `quantile`, m5 and m6.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Clone)]
pub struct StreamArgs {
    /// CSV with header `y,x1..,z1..`; stdin when omitted or `-`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Rows per batch after the first; all rows form one batch when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Rows of the first batch; defaults to the batch size.
    #[arg(long)]
    pub first_batch: Option<usize>,
    /// Stop after this many batches.
    #[arg(long)]
    pub batches: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Fixed,
    Welford,
    Klrv,
}

#[derive(Args, Clone)]
pub struct WeightArgs {
    /// Weighting matrix: identity, inverse sample variance, or inverse kernel long-run variance.
    #[arg(long, value_enum, default_value = "klrv")]
    pub weighting: WeightingArg,
    /// Kernel exponent of the long-run variance.
    #[arg(long, default_value_t = 1)]
    pub lambda: u32,
    /// Memory factor of the long-run variance.
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    /// Observations before the long-run variance replaces the identity; defaults to the first batch size.
    #[arg(long)]
    pub pilot: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ogmm,
    OgmmImplicit,
    Sgmm,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long, default_value_t = 1000)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    #[command(flatten)]
    pub weight: WeightArgs,
    #[arg(long, value_enum, default_value = "ogmm")]
    pub method: MethodArg,
    /// Quantile of the gradient norms used to pick the SGMM learning rate.
    #[arg(long, default_value_t = 0.5)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Write the per-batch table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Save the final OGMM state as a JSON snapshot.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatisticArg {
    Sargan,
    Tf,
    Tu,
    Tr,
}

#[derive(Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    #[command(flatten)]
    pub weight: WeightArgs,
    #[arg(long, value_enum, default_value = "sargan")]
    pub statistic: StatisticArg,
    /// Number of leading batches pooled into the reference of tf, tu and tr.
    #[arg(long, default_value_t = 1)]
    pub reference_batches: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Experiment configuration (TOML).
    pub config: PathBuf,
    /// Override the number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Override the base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics CSV path; records and a JSON sidecar are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReplayArgs {
    /// Snapshot written by `estimate --snapshot`.
    #[arg(long)]
    pub from: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Save the state after the last batch.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Test(a) => commands::test(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Replay(a) => commands::replay(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
