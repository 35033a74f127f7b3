//! Experiment configuration: a TOML file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use qdispatch::experiment::ExperimentConfig;
use qdispatch::policies::{PolicyKind, PolicySpec, WarmStart};
use qdispatch::sim::{log_checkpoints, Scenario, DEFAULT_CHECKPOINTS};
use qdispatch::SystemParams;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.1, 0.2, 0.4, 0.5, 0.7];
pub const DEFAULT_POLICIES: [&str; 4] = ["eps-klnt", "eps-kt", "ucb", "ts"];
pub const DEFAULT_SERVERS: usize = 6;
pub const DEFAULT_TOTAL_SERVICE: f64 = 0.99;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(xs) => xs.clone(),
        }
    }
}

/// Service rates, given explicitly or as a geometric ladder
/// `mu_i = 2^(i-1) mu_1` with a fixed total.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub mu: Option<Vec<f64>>,
    pub servers: Option<usize>,
    pub total_service: Option<f64>,
}

impl SystemSection {
    pub fn params(&self, lambda: f64) -> Result<SystemParams, CliError> {
        let params = match &self.mu {
            Some(mu) => {
                if self.servers.is_some() || self.total_service.is_some() {
                    return Err(CliError::Config(
                        "system: give either `mu` or `servers`/`total_service`, not both".into(),
                    ));
                }
                SystemParams::new(lambda, mu.clone())
            }
            None => SystemParams::geometric_rates(
                lambda,
                self.servers.unwrap_or(DEFAULT_SERVERS),
                self.total_service.unwrap_or(DEFAULT_TOTAL_SERVICE),
            ),
        };
        params.map_err(|e| CliError::Config(format!("system (lambda = {lambda}): {e}")))
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CheckpointSpec {
    Count(usize),
    Slots(Vec<u64>),
}

/// The file layer of a `regret` experiment. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RegretFile {
    pub lambda: Option<OneOrMany<f64>>,
    pub horizon: Option<u64>,
    pub reps: Option<u64>,
    pub policies: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub raw: Option<PathBuf>,
    pub threads: Option<usize>,
    pub checkpoints: Option<CheckpointSpec>,
    /// "optimistic" or "uniform".
    pub warm_start: Option<String>,
    #[serde(default)]
    pub system: SystemSection,
}

impl RegretFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegretOverrides {
    pub lambda: Option<Vec<f64>>,
    pub horizon: Option<u64>,
    pub reps: Option<u64>,
    pub policies: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub raw: Option<PathBuf>,
    pub threads: Option<usize>,
    pub mu: Option<Vec<f64>>,
}

/// A fully resolved `regret` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretPlan {
    pub experiment: ExperimentConfig,
    pub out: Option<PathBuf>,
    pub raw: Option<PathBuf>,
}

pub fn parse_warm_start(s: &str) -> Result<WarmStart, CliError> {
    match s {
        "optimistic" => Ok(WarmStart::Optimistic),
        "uniform" => Ok(WarmStart::UniformUntilSampled),
        _ => Err(CliError::Config(format!(
            "warm_start: expected \"optimistic\" or \"uniform\", got {s:?}"
        ))),
    }
}

impl RegretPlan {
    /// Scenario order is policy-major, then lambda; the position of a
    /// scenario fixes its replication seeds.
    pub fn resolve(file: RegretFile, flags: RegretOverrides) -> Result<Self, CliError> {
        let lambdas = flags
            .lambda
            .or_else(|| file.lambda.as_ref().map(OneOrMany::to_vec))
            .unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
        let horizon = flags.horizon.or(file.horizon).unwrap_or(100_000);
        let reps = flags.reps.or(file.reps).unwrap_or(200);
        let policies = flags
            .policies
            .or(file.policies)
            .unwrap_or_else(|| DEFAULT_POLICIES.iter().map(|s| s.to_string()).collect());
        let warm_start = match &file.warm_start {
            Some(s) => parse_warm_start(s)?,
            None => WarmStart::default(),
        };
        let mut system = file.system.clone();
        if let Some(mu) = flags.mu {
            system = SystemSection {
                mu: Some(mu),
                ..SystemSection::default()
            };
        }
        if lambdas.is_empty() {
            return Err(CliError::Config(
                "lambda: at least one value required".into(),
            ));
        }
        if policies.is_empty() {
            return Err(CliError::Config(
                "policies: at least one policy required".into(),
            ));
        }
        if horizon == 0 {
            return Err(CliError::Config("horizon: must be at least 1".into()));
        }
        let checkpoints = match &file.checkpoints {
            None => log_checkpoints(horizon, DEFAULT_CHECKPOINTS),
            Some(CheckpointSpec::Count(n)) => log_checkpoints(horizon, *n),
            Some(CheckpointSpec::Slots(s)) => s.clone(),
        };

        let mut scenarios = Vec::new();
        for name in &policies {
            let kind: PolicyKind = name
                .parse()
                .map_err(|e| CliError::Config(format!("policies: {e}")))?;
            let spec = PolicySpec::blind(kind)
                .map_err(|e| CliError::Config(format!("policies: {e}")))?
                .with_warm_start(warm_start);
            for &lambda in &lambdas {
                let params = system.params(lambda)?;
                let scenario = Scenario::new(params, horizon, spec.clone())
                    .and_then(|s| s.with_checkpoints(checkpoints.clone()))
                    .map_err(|e| {
                        CliError::Config(format!("scenario {name} at lambda {lambda}: {e}"))
                    })?;
                scenarios.push(scenario);
            }
        }
        let experiment = ExperimentConfig {
            scenarios,
            replications: reps,
            base_seed: flags.seed.or(file.seed).unwrap_or(1),
            threads: flags.threads.or(file.threads),
        };
        experiment
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            experiment,
            out: flags.out.or(file.out),
            raw: flags.raw.or(file.raw),
        })
    }
}
