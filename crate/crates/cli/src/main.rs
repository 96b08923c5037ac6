//! `emax`: classification, estimation, design and simulation for the
//! three-point Emax model.

// `!(x > y)` comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod data;
mod manifest;

pub const DEFAULT_SEED: u64 = 20_240_101;

#[derive(Debug, Parser)]
#[command(name = "emax", version, about = "Three-point Emax model: MLE existence, Firth estimates and designs")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Seed for every random stream.
    #[arg(long, global = true, env = "EMAX_SEED")]
    pub seed: Option<u64>,

    /// Write the result here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify the shape of the dose means.
    #[command(allow_negative_numbers = true)]
    Classify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Estimate the parameters.
    #[command(allow_negative_numbers = true)]
    Fit(FitArgs),
    /// Central dose of a three-point design.
    #[command(allow_negative_numbers = true)]
    Design(DesignArgs),
    /// Probabilities of the shape classes for one scenario.
    #[command(allow_negative_numbers = true)]
    Prob {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Replicate the simulation study over guessed theta2 values.
    #[command(allow_negative_numbers = true)]
    Simulate(SimulateArgs),
    /// Class probabilities over a grid of central doses, or size-alpha doses
    /// over a grid of alphas.
    #[command(allow_negative_numbers = true)]
    Sweep(SweepArgs),
    /// Rerun the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMethod {
    Mle,
    Firth,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DesignMode {
    Dopt,
    Alpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbKind {
    Mc,
    Quad,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Convergence threshold on the sup norm of the modified score.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    /// Largest admissible |theta2| (default 1e6 (x3 - x1)).
    #[arg(long)]
    pub theta2_cap: Option<f64>,
    /// Grid starts at theta2 + x1 = (x3 - x1) 2^k, |k| <= starts.
    #[arg(long, default_value_t = 6)]
    pub starts: i32,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = FitMethod::Auto)]
    pub method: FitMethod,
    /// Noise standard deviation; estimated from replicates when omitted.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Guess of theta2 behind the central dose (default: implied by x2).
    #[arg(long)]
    pub theta2_g: Option<f64>,
    /// Smaller guess for a follow-up dose (default theta2_g / 2).
    #[arg(long)]
    pub theta2_1: Option<f64>,
    /// Target size of the Case 1 test for the follow-up dose; needs --theta1.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub theta1: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[arg(long, default_value_t = 0.001)]
    pub a: f64,
    #[arg(long, default_value_t = 150.0)]
    pub b: f64,
    #[arg(long)]
    pub theta2: f64,
    #[arg(long, value_enum, default_value_t = DesignMode::Dopt)]
    pub mode: DesignMode,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0.467)]
    pub theta1: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Observations per dose.
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    #[command(flatten)]
    pub method: MethodArgs,
}

#[derive(Debug, Args, Clone)]
pub struct ScenarioArgs {
    #[arg(long, default_value_t = 0.001)]
    pub a: f64,
    #[arg(long, default_value_t = 150.0)]
    pub b: f64,
    #[arg(long, default_value_t = 2.0)]
    pub theta0: f64,
    #[arg(long, default_value_t = 0.467)]
    pub theta1: f64,
    /// True half-effect parameter.
    #[arg(long, default_value_t = 50.0)]
    pub theta2: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Observations per dose: one value, or three comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "6")]
    pub n: Vec<usize>,
    /// Central dose (default: D-optimal for --theta2-g).
    #[arg(long)]
    pub x2: Option<f64>,
    /// Guess of theta2 placing the central dose (default: --theta2).
    #[arg(long)]
    pub theta2_g: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct MethodArgs {
    #[arg(long, value_enum)]
    pub method: Option<ProbKind>,
    /// Monte Carlo draws.
    #[arg(long, default_value_t = 1_000_000)]
    pub draws: u64,
    /// Absolute quadrature tolerance.
    #[arg(long, default_value_t = 1e-10)]
    pub quad_tol: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON configuration; replaces the scenario flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_delimiter = ',', default_value = "12.5,25,50,75,100")]
    pub theta2_g_list: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub replicates: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// True theta2 values (one curve each).
    #[arg(long, value_delimiter = ',', default_value = "12.5,25,50,75,100")]
    pub theta2_list: Vec<f64>,
    /// Central doses: comma-separated values or `log:N` for N log-spaced points.
    #[arg(long, default_value = "log:100")]
    pub x2_grid: String,
    /// Comma-separated alphas; switches to size-alpha central doses.
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    #[command(flatten)]
    pub method: MethodArgs,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli, argv[1..].to_vec()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
