//! Command-line front end for `qdispatch`.
//!
//! Subcommands: `solve` (optimal routing and its constants as JSON),
//! `simulate` (one uncoupled run), `regret` (replicated coupled runs to CSV)
//! and `verify` (self-checks, one JSON line each).
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration error.

pub mod commands;
pub mod config;
pub mod json;
pub mod verify;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qdispatch::policies::{Observation, PolicyKind, PolicySpec};
use qdispatch::{Scenario, SystemParams};
use serde::Serialize;
use thiserror::Error;

use crate::config::{parse_warm_start, RegretFile, RegretOverrides, RegretPlan, SystemSection};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] qdispatch::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ChecksFailed(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "qdispatch",
    version,
    about = "Optimal weighted random routing and learning dispatch policies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimal routing vector, support, residuals and sensitivity constants.
    Solve(SolveArgs),
    /// One uncoupled run reporting queue lengths and response times.
    Simulate(SimulateArgs),
    /// Replicated coupled runs; aggregate regret per checkpoint as CSV.
    Regret(RegretArgs),
    /// Run the self-check suite.
    Verify(VerifyArgs),
}

/// Service rates: explicit, or a geometric ladder with a fixed total.
#[derive(Debug, Clone, Args)]
pub struct SystemArgs {
    /// Comma-separated service rates.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["servers", "total_service"])]
    pub mu: Option<Vec<f64>>,
    /// Number of servers in the geometric ladder mu_i = 2^(i-1) mu_1.
    #[arg(long)]
    pub servers: Option<usize>,
    /// Total service rate of the geometric ladder.
    #[arg(long)]
    pub total_service: Option<f64>,
}

impl SystemArgs {
    fn params(&self, lambda: f64) -> Result<SystemParams, CliError> {
        SystemSection {
            mu: self.mu.clone(),
            servers: self.servers,
            total_service: self.total_service,
        }
        .params(lambda)
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub lambda: f64,
    #[command(flatten)]
    pub system: SystemArgs,
    /// Bisection resolution of the tolerance-gap bracket.
    #[arg(long, default_value_t = commands::DEFAULT_GAP_RESOLUTION)]
    pub gap_resolution: f64,
    /// Random perturbations tested per bisection step.
    #[arg(long, default_value_t = commands::DEFAULT_GAP_SAMPLES)]
    pub gap_samples: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub lambda: f64,
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value = "eps-klnt")]
    pub policy: String,
    /// Queue observation: none, full, own or delayed:<q>.
    #[arg(long, default_value = "none")]
    pub obs: String,
    /// Warm start for unsampled servers: optimistic or uniform.
    #[arg(long, default_value = "optimistic")]
    pub warm_start: String,
    /// Comma-separated per-server external arrival rates.
    #[arg(long, value_delimiter = ',')]
    pub external: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100_000)]
    pub horizon: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RegretArgs {
    /// TOML experiment file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated arrival rates.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub mu: Option<Vec<f64>>,
    #[arg(long)]
    pub horizon: Option<u64>,
    #[arg(long)]
    pub reps: Option<u64>,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines destination for per-replication traces.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Worker threads; all cores if absent.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = verify::REFERENCE_SEED)]
    pub seed: u64,
}

#[derive(Serialize)]
struct VerifySummary {
    passed: bool,
    checks: usize,
    failed: usize,
}

fn parse_spec(policy: &str, obs: &str, warm_start: &str) -> Result<PolicySpec, CliError> {
    let kind: PolicyKind = policy
        .parse()
        .map_err(|e| CliError::Config(format!("--policy: {e}")))?;
    let observation: Observation = obs
        .parse()
        .map_err(|e| CliError::Config(format!("--obs: {e}")))?;
    Ok(PolicySpec::new(kind, observation)
        .map_err(|e| CliError::Config(format!("--policy/--obs: {e}")))?
        .with_warm_start(parse_warm_start(warm_start)?))
}

/// Execute a parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(a) => {
            let params = a.system.params(a.lambda)?;
            if a.gap_resolution.is_nan() || a.gap_resolution <= 0.0 {
                return Err(CliError::Config("--gap-resolution must be positive".into()));
            }
            let report = commands::solve(&params, a.gap_resolution, a.gap_samples)?;
            writeln!(out, "{}", json::to_line(&report))?;
        }
        Command::Simulate(a) => {
            let params = a.system.params(a.lambda)?;
            let spec = parse_spec(&a.policy, &a.obs, &a.warm_start)?;
            let mut scenario = Scenario::new(params, a.horizon, spec)
                .map_err(|e| CliError::Config(e.to_string()))?;
            if let Some(ext) = a.external {
                scenario = scenario
                    .with_external(ext)
                    .map_err(|e| CliError::Config(format!("--external: {e}")))?;
            }
            let report = commands::simulate(&scenario, a.seed)?;
            writeln!(out, "{}", json::to_line(&report))?;
        }
        Command::Regret(a) => {
            let file = match &a.config {
                Some(path) => RegretFile::load(path)?,
                None => RegretFile::default(),
            };
            let flags = RegretOverrides {
                lambda: a.lambda,
                horizon: a.horizon,
                reps: a.reps,
                policies: a.policies,
                seed: a.seed,
                out: a.out,
                raw: a.raw,
                threads: a.threads,
                mu: a.mu,
            };
            let plan = RegretPlan::resolve(file, flags)?;
            commands::regret(&plan, out)?;
        }
        Command::Verify(a) => {
            let reports = verify::run_all(verify::reference_solver, a.seed);
            for r in &reports {
                writeln!(out, "{}", json::to_line(r))?;
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            let summary = VerifySummary {
                passed: failed == 0,
                checks: reports.len(),
                failed,
            };
            writeln!(out, "{}", json::to_line(&summary))?;
            if failed > 0 {
                return Err(CliError::ChecksFailed(failed));
            }
        }
    }
    Ok(())
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("qdispatch: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
