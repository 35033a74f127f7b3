//! The `solve`, `simulate` and `regret` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use qdispatch::experiment::{run_experiment, write_csv, ExperimentResult};
use qdispatch::routing::search_support;
use qdispatch::{
    run_single, sensitivity_constants, tolerance_gap_estimate, total_mean_queue, Scenario,
    SingleRunMetrics, SystemParams,
};
use serde::Serialize;

use crate::config::RegretPlan;
use crate::json::{nums, to_line, Num};
use crate::CliError;

pub const DEFAULT_GAP_RESOLUTION: f64 = 1e-9;
pub const DEFAULT_GAP_SAMPLES: usize = 256;

#[derive(Debug, Serialize)]
pub struct SolveReport {
    pub lambda: Num,
    pub mu: Vec<Num>,
    pub p: Vec<Num>,
    pub support: Vec<usize>,
    pub mean_queue: Num,
    pub r: Vec<Num>,
    pub delta_cap: Num,
    pub c: Num,
    pub c1: Num,
    pub c2: Num,
    pub c_g: Num,
    pub mu_tilde: Num,
    #[serde(rename = "delta_S_interval")]
    pub delta_s_interval: [Num; 2],
    pub gap_sampling_only: bool,
    pub zero_gap: bool,
    /// The next slower server sits exactly on the support boundary.
    pub boundary: bool,
}

pub fn solve(
    params: &SystemParams,
    resolution: f64,
    samples: usize,
) -> Result<SolveReport, CliError> {
    let search = search_support(params);
    let routing = search.routing;
    let gap = tolerance_gap_estimate(params, resolution, samples)?;
    let k = sensitivity_constants(params, &gap);
    Ok(SolveReport {
        lambda: Num(params.lambda()),
        mu: nums(params.mu()),
        p: nums(routing.probabilities()),
        support: routing.support().to_vec(),
        mean_queue: Num(total_mean_queue(params, &routing)?),
        r: nums(&k.r),
        delta_cap: Num(k.delta_cap),
        c: Num(k.c),
        c1: Num(k.c1),
        c2: Num(k.c2),
        c_g: Num(k.c_g),
        mu_tilde: Num(k.mu_tilde),
        delta_s_interval: [Num(gap.lo), Num(gap.hi)],
        gap_sampling_only: gap.sampling_only,
        zero_gap: k.zero_gap,
        boundary: search.boundary,
    })
}

#[derive(Debug, Serialize)]
pub struct SimulateReport {
    pub policy: String,
    pub lambda: Num,
    pub mu: Vec<Num>,
    pub external: Option<Vec<Num>>,
    pub seed: u64,
    pub horizon: u64,
    pub mean_total_queue: Num,
    pub mean_queue: Vec<Num>,
    pub utilization: Vec<Num>,
    pub mean_response_time: Num,
    pub mean_response_time_all: Num,
    pub dispatched: u64,
    pub completed_dispatched: u64,
    pub dispatch_fraction: Vec<Num>,
    pub fallbacks: u64,
    pub final_estimates: Vec<Num>,
}

pub fn simulate(scenario: &Scenario, seed: u64) -> Result<SimulateReport, CliError> {
    let m: SingleRunMetrics = run_single(scenario, seed)?;
    Ok(SimulateReport {
        policy: scenario.policy.label(),
        lambda: Num(scenario.params.lambda()),
        mu: nums(scenario.params.mu()),
        external: scenario.external.as_deref().map(nums),
        seed: m.seed,
        horizon: m.horizon,
        mean_total_queue: Num(m.mean_total_queue),
        mean_queue: nums(&m.mean_queue),
        utilization: nums(&m.utilization),
        mean_response_time: Num(m.mean_response_time),
        mean_response_time_all: Num(m.mean_response_time_all),
        dispatched: m.dispatched,
        completed_dispatched: m.completed_dispatched,
        dispatch_fraction: nums(&m.dispatch_fraction),
        fallbacks: m.fallbacks,
        final_estimates: nums(&m.final_estimates),
    })
}

#[derive(Debug, Serialize)]
struct RawTrace<'a> {
    scenario: usize,
    policy: String,
    lambda: Num,
    replication: u64,
    seed: u64,
    checkpoints: &'a [u64],
    regret: &'a [i64],
    mismatches: &'a [u64],
    fallbacks: u64,
}

/// Run the experiment and write the aggregate CSV to `plan.out` (or
/// `stdout`), plus per-replication JSON lines to `plan.raw` if set.
pub fn regret(plan: &RegretPlan, stdout: &mut dyn Write) -> Result<ExperimentResult, CliError> {
    let result = run_experiment(&plan.experiment)?;
    match &plan.out {
        Some(path) => {
            let mut w = create(path)?;
            write_csv(&result.rows, &mut w)?;
            w.flush()?;
        }
        None => write_csv(&result.rows, &mut *stdout)?,
    }
    if let Some(path) = &plan.raw {
        let mut w = create(path)?;
        for rep in &result.replications {
            let scenario = &plan.experiment.scenarios[rep.scenario];
            let line = RawTrace {
                scenario: rep.scenario,
                policy: scenario.policy.label(),
                lambda: Num(scenario.params.lambda()),
                replication: rep.replication,
                seed: rep.run.trace.seed,
                checkpoints: &rep.run.trace.checkpoints,
                regret: &rep.run.trace.regret,
                mismatches: &rep.run.diagnostics.mismatches,
                fallbacks: rep.run.diagnostics.fallbacks,
            };
            writeln!(w, "{}", to_line(&line))?;
        }
        w.flush()?;
    }
    Ok(result)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_two_server() {
        let params = SystemParams::new(0.2, vec![0.45, 0.55]).unwrap();
        let report = solve(&params, 1e-6, 16).unwrap();
        assert_eq!(report.support, vec![0, 1]);
        assert!((report.p[0].0 - 0.25).abs() <= 1e-12);
        assert!((report.mean_queue.0 - 19.0 / 80.0).abs() < 1e-12);
        let text = to_line(&report);
        for field in [
            "\"p\"",
            "\"support\"",
            "\"r\"",
            "\"delta_cap\"",
            "\"c\"",
            "\"c_g\"",
            "\"delta_S_interval\"",
        ] {
            assert!(text.contains(field), "{field} missing in {text}");
        }
    }
}
