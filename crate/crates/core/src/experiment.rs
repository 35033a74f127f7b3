//! Replicated coupled runs and per-checkpoint aggregation.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::{run_coupled, CoupledRun, Scenario};

pub const CSV_HEADER: &str = "policy,lambda,t,mean_regret,std_regret,reps";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Scenario matrix; the position of a scenario is its index in seed
    /// derivation.
    pub scenarios: Vec<Scenario>,
    pub replications: u64,
    pub base_seed: u64,
    /// Worker pool size; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidScenario(
                "replications must be at least 1".into(),
            ));
        }
        let Some(first) = self.scenarios.first() else {
            return Err(Error::InvalidScenario("no scenarios configured".into()));
        };
        for s in &self.scenarios {
            s.validate()?;
            if s.checkpoints != first.checkpoints {
                return Err(Error::InvalidScenario(
                    "all scenarios of an experiment must share one checkpoint grid".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub policy: String,
    pub lambda: f64,
    pub t: u64,
    pub mean_regret: f64,
    /// Sample standard deviation across replications (0 for one replication).
    pub std_regret: f64,
    pub reps: u64,
}

/// One finished replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replication {
    pub scenario: usize,
    pub replication: u64,
    pub run: CoupledRun,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub rows: Vec<AggregateRow>,
    pub replications: Vec<Replication>,
}

/// Run every scenario `replications` times on derived seeds and aggregate
/// the regret at each checkpoint. The result does not depend on the worker
/// pool size.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let jobs: Vec<(usize, u64)> = (0..config.scenarios.len())
        .flat_map(|s| (0..config.replications).map(move |r| (s, r)))
        .collect();
    let work = || -> Result<Vec<Replication>> {
        jobs.par_iter()
            .map(|&(s, r)| {
                let seed = derive_seed(config.base_seed, s as u64, r);
                run_coupled(&config.scenarios[s], seed).map(|run| Replication {
                    scenario: s,
                    replication: r,
                    run,
                })
            })
            .collect()
    };
    let replications = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidScenario(format!("worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let rows = aggregate(&config.scenarios, &replications);
    Ok(ExperimentResult { rows, replications })
}

/// Mean and sample standard deviation per scenario and checkpoint, folded
/// in replication order, then sorted by (policy, lambda, t).
pub fn aggregate(scenarios: &[Scenario], replications: &[Replication]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for (s, scenario) in scenarios.iter().enumerate() {
        let mut runs: Vec<&Replication> = replications.iter().filter(|r| r.scenario == s).collect();
        runs.sort_by_key(|r| r.replication);
        let n = runs.len() as u64;
        if n == 0 {
            continue;
        }
        for (j, &t) in scenario.checkpoints.iter().enumerate() {
            let values: Vec<f64> = runs.iter().map(|r| r.run.trace.regret[j] as f64).collect();
            let (mean, std) = mean_std(&values);
            rows.push(AggregateRow {
                policy: scenario.policy.label(),
                lambda: scenario.params.lambda(),
                t,
                mean_regret: mean,
                std_regret: std,
                reps: n,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.policy
            .cmp(&b.policy)
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.t.cmp(&b.t))
    });
    rows
}

/// Mean and sample standard deviation (`n - 1` denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Float formatting with 17 significant digits.
pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv<W: Write>(rows: &[AggregateRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.policy,
            sig17(r.lambda),
            r.t,
            sig17(r.mean_regret),
            sig17(r.std_regret),
            r.reps
        )?;
    }
    Ok(())
}
