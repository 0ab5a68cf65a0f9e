//! Command-line front end: dataset generation, odometry runs, trajectory
//! evaluation and method ablations.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 internal. Failures print one
//! JSON object `{"error", "code", "message"}` on standard error.

pub mod commands;
pub mod config;
pub mod error;

use crate::commands::{cmd_ablate, cmd_evaluate, cmd_run, cmd_simulate, summary_json, AblateParams, SimulateParams};
use crate::config::{Method, Overrides};
use crate::error::{CliError, CliResult};
use alio_core::evaluation::Alignment;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "alio", version, about = "LiDAR-inertial odometry on simulated planar worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset directory from a preset world.
    Simulate(SimulateArgs),
    /// Run the odometry pipeline over a dataset.
    Run(RunArgs),
    /// Compare a TUM trajectory against ground truth.
    Evaluate(EvaluateArgs),
    /// Run every method preset over datasets and seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// room, corridor, tunnel or ground_only.
    #[arg(long)]
    pub preset: String,
    /// Room extent x,y,z (m).
    #[arg(long, value_delimiter = ',', value_name = "X,Y,Z")]
    pub size: Option<Vec<f64>>,
    #[arg(long)]
    pub length: Option<f64>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub height: Option<f64>,
    /// Close the corridor at both ends.
    #[arg(long)]
    pub end_caps: bool,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub segments: Option<usize>,
    /// Sequence length (s).
    #[arg(long, default_value_t = 20.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Range noise σ (m).
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Rays per scan.
    #[arg(long, default_value_t = 10_000)]
    pub rays: usize,
    /// Scan rate (Hz).
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
    /// Disable inertial noise.
    #[arg(long)]
    pub noiseless_imu: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSON run configuration (see docs/config.schema.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Override one estimator key, e.g. `--set degeneracy.tau_global=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AlignmentArg {
    None,
    FirstPose,
    Umeyama,
}

impl From<AlignmentArg> for Alignment {
    fn from(a: AlignmentArg) -> Self {
        match a {
            AlignmentArg::None => Alignment::None,
            AlignmentArg::FirstPose => Alignment::FirstPose,
            AlignmentArg::Umeyama => Alignment::Umeyama,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value = "first_pose")]
    pub alignment: AlignmentArg,
    /// Largest timestamp gap for an associated pair (s).
    #[arg(long, default_value_t = 0.01)]
    pub max_dt: f64,
    /// Optional CSV with one `rmse,mean,max,count` row.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset directories; each is regenerated per seed from its meta.json.
    #[arg(long, num_args = 1.., required = true)]
    pub datasets: Vec<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

/// Executes a parsed command and returns its JSON summary line.
pub fn execute(command: Command) -> CliResult<String> {
    match command {
        Command::Simulate(a) => {
            let params = SimulateParams {
                preset: a.preset,
                size: a.size,
                length: a.length,
                width: a.width,
                height: a.height,
                end_caps: a.end_caps,
                radius: a.radius,
                segments: a.segments,
                duration: a.duration,
                seed: a.seed,
                noise: a.noise,
                rays: a.rays,
                rate: a.rate,
                noiseless_imu: a.noiseless_imu,
            };
            Ok(summary_json(&cmd_simulate(&params.to_config()?, &a.out)?))
        }
        Command::Run(a) => {
            let o = Overrides { config: a.config, dataset: a.dataset, out: a.out, method: a.method, seed: None, sets: a.sets };
            Ok(summary_json(&cmd_run(&o)?))
        }
        Command::Evaluate(a) => {
            let s = cmd_evaluate(&a.est, &a.gt, a.alignment.into(), a.max_dt, a.out.as_deref())?;
            Ok(json!({ "rmse": s.rmse, "mean": s.mean, "max": s.max, "count": s.count }).to_string())
        }
        Command::Ablate(a) => {
            let params =
                AblateParams { datasets: a.datasets, seeds: a.seeds, config: a.config, sets: a.sets, out: a.out.clone(), jobs: a.jobs };
            let rows = cmd_ablate(&params)?;
            let table: Vec<_> = rows
                .iter()
                .map(|r| json!({ "sequence": r.sequence, "method": r.method, "rmse": r.summary.rmse }))
                .collect();
            Ok(json!({ "out": a.out, "comparison": table }).to_string())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let message = e.render().to_string();
            let err = CliError::Usage(message.lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", err.json_line());
            eprint!("{message}");
            return err.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(line) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{line}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.json_line());
            e.exit_code()
        }
    }
}
