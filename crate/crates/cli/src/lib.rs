//! The `diffdyn` command line: `simulate`, `optimize`, `gradcheck` and
//! `benchmark`. Every command writes plain CSV.

pub mod benchmark;
pub mod config;
pub mod gradcheck;
pub mod optimize;
pub mod simulate;

use std::fmt;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Success,
    /// I/O and other failures outside the categories below.
    Failure,
    Usage,
    BudgetExhausted,
    NumericalFailure,
}

impl Exit {
    pub fn code(self) -> u8 {
        match self {
            Exit::Success => 0,
            Exit::Failure => 1,
            Exit::Usage => 2,
            Exit::BudgetExhausted => 3,
            Exit::NumericalFailure => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Usage,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self {
            exit: Exit::Failure,
            message: e.to_string(),
        }
    }
}

impl From<diffdyn::Error> for CliError {
    fn from(e: diffdyn::Error) -> Self {
        let exit = match &e {
            diffdyn::Error::Model(_) | diffdyn::Error::Contract(_) => Exit::Usage,
            diffdyn::Error::NonFinite { .. } | diffdyn::Error::Trace(_) => Exit::NumericalFailure,
            diffdyn::Error::Io(_) => Exit::Failure,
        };
        Self {
            exit,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "diffdyn",
    version,
    about = "Differentiable rigid-body simulation and controller optimization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Step a scene forward and write its state trace.
    Simulate(SimulateArgs),
    /// Optimize a scenario's parameters with sgd, adam or cma-es.
    Optimize(OptimizeArgs),
    /// Compare tape gradients with central differences on random rollouts.
    Gradcheck(GradcheckArgs),
    /// Time forward and forward-plus-backward quadruped rollouts.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Scene file (JSON).
    #[arg(long, value_name = "PATH")]
    pub scene: Option<PathBuf>,
    /// Built-in scenario: ball-throw, arm-fixed, arm-random, quadruped-gait.
    #[arg(long, value_name = "NAME")]
    pub scenario: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Simulated seconds; a multiple of the time step.
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    /// Time step override, s.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Directory for `trace.csv`; the trace goes to stdout without it.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// JSON file with any of the run configuration fields.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "sgd|adam|cma-es")]
    pub method: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Updates for gradient methods, evaluations for cma-es.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Worker threads; defaults to DIFFDYN_THREADS, then 1.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Episode length override, simulated seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Gradient decay per step of backpropagation through time.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Gradient L2 clip norm.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initial cma-es step size.
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl OptimizeArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            scenario: self.scene.scenario.clone(),
            scene: self.scene.scene.clone(),
            method: self.method.clone(),
            seed: self.seed,
            iters: self.iters,
            batch: self.batch,
            workers: self.workers,
            dt: self.dt,
            duration: self.duration,
            alpha: self.alpha,
            clip: self.clip,
            lr: self.lr,
            sigma0: self.sigma0,
            out: self.out.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// ball, ball-bounce, arm or all.
    #[arg(long, alias = "scenario", default_value = "all")]
    pub kind: String,
    /// Rollout length; each kind has its own default. At most 50.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `gradcheck.csv`; the table goes to stdout without it.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Batch sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 128])]
    pub batch: Vec<usize>,
    /// Hidden layer widths of the two-layer controller; 128 gives 17 944
    /// parameters and 1066 about 1.15 million.
    #[arg(long, value_delimiter = ',', default_values_t = [128, 1066])]
    pub widths: Vec<usize>,
    /// Worker counts; defaults to DIFFDYN_THREADS, then 1.
    #[arg(long, value_delimiter = ',')]
    pub workers: Vec<usize>,
    /// Simulated seconds per rollout.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `benchmark.csv`; the table goes to stdout without it.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command. Tables go to `out` unless an output directory was
/// given; progress and summaries go to `log`.
pub fn run(cli: &Cli, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<Exit> {
    match &cli.command {
        Command::Simulate(a) => simulate::run(a, out),
        Command::Optimize(a) => optimize::run(a, out, log),
        Command::Gradcheck(a) => gradcheck::run(a, out, log),
        Command::Benchmark(a) => benchmark::run(a, out, log),
    }
}

/// Worker count from `DIFFDYN_THREADS`, or 1.
pub fn default_workers() -> CliResult<usize> {
    match std::env::var("DIFFDYN_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::usage(format!(
                "DIFFDYN_THREADS: expected a positive integer, got {s:?}"
            ))),
        },
        Err(_) => Ok(1),
    }
}

/// Number of `dt` steps in `duration`, which must be a whole multiple.
pub fn step_count(duration: f64, dt: f64) -> CliResult<usize> {
    let n = duration / dt;
    if !(duration >= 0.0) || !n.is_finite() || (n - n.round()).abs() > 1e-6 {
        return Err(CliError::usage(format!(
            "duration {duration} is not a non-negative multiple of dt {dt}"
        )));
    }
    Ok(n.round() as usize)
}

/// `n·dt` computed so that decimal step sizes print without round-off
/// (`3 · 0.01` prints as `0.03`).
pub fn step_time(n: usize, dt: f64) -> f64 {
    let rate = (1.0 / dt).round();
    if rate > 0.0 && (rate * dt - 1.0).abs() < 1e-12 {
        n as f64 / rate
    } else {
        n as f64 * dt
    }
}
