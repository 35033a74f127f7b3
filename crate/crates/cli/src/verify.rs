//! Self-verification: oracle cross-checks, coupling exactness, concentration
//! tails, steady-state agreement and the sensitivity bound.
//!
//! Every check takes the routing solver as a parameter so that a deliberately
//! broken solver can be shown to fail.

use std::collections::BTreeMap;

use qdispatch::model::total_mean_queue_for;
use qdispatch::routing::{rate_order, routing_for_support, support_for_rates, ZERO_TOLERANCE};
use qdispatch::sim::{run_coupled, run_single, sample_maximal_coupling, tv_distance, Scenario};
use qdispatch::{
    concentration_bound, optimal_routing, oracle_optimal_routing, sensitivity_constants,
    tolerance_gap_estimate, PolicyKind, PolicySpec, Purpose, RandomStream, RoutingVector, StreamId,
    SystemParams,
};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::json::Num;

pub type Solver = fn(&SystemParams) -> RoutingVector;

pub const REFERENCE_SEED: u64 = 20_240_601;
pub const CHI_SQUARE_LEVEL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Metric {
    Count(u64),
    Value(Num),
}

impl From<u64> for Metric {
    fn from(n: u64) -> Self {
        Metric::Count(n)
    }
}

impl From<usize> for Metric {
    fn from(n: usize) -> Self {
        Metric::Count(n as u64)
    }
}

impl From<f64> for Metric {
    fn from(x: f64) -> Self {
        Metric::Value(Num(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: &'static str,
    pub passed: bool,
    pub cases: u64,
    pub failures: u64,
    pub metrics: BTreeMap<&'static str, Metric>,
}

impl CheckReport {
    fn new(check: &'static str) -> Self {
        Self {
            check,
            passed: true,
            cases: 0,
            failures: 0,
            metrics: BTreeMap::new(),
        }
    }

    fn case(&mut self, ok: bool) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
        }
    }

    fn metric(&mut self, name: &'static str, value: impl Into<Metric>) {
        self.metrics.insert(name, value.into());
    }

    fn finish(mut self) -> Self {
        self.passed = self.failures == 0;
        self
    }
}

/// Random feasible instance with `k` servers, rates in `(0.01, 0.99)` and
/// `lambda` anywhere in `(0, min(1, sum mu))`.
pub fn random_instance(rng: &mut RandomStream, k: usize) -> SystemParams {
    loop {
        let mu: Vec<f64> = (0..k).map(|_| 0.01 + 0.98 * rng.uniform()).collect();
        let cap = mu.iter().sum::<f64>().min(1.0);
        let lambda = cap * (0.01 + 0.98 * rng.uniform());
        if let Ok(p) = SystemParams::new(lambda, mu) {
            return p;
        }
    }
}

fn check_stream(seed: u64, lane: u64) -> RandomStream {
    RandomStream::new(seed, StreamId::new(lane, Purpose::Check, None))
}

/// Random instances shared by the oracle and support-lemma checks.
pub fn oracle_instances(seed: u64, count: usize, max_servers: usize) -> Vec<SystemParams> {
    let mut rng = check_stream(seed, 1);
    (0..count)
        .map(|_| {
            let k = 1 + rng.index(max_servers);
            random_instance(&mut rng, k)
        })
        .collect()
}

/// Solver output against prefix enumeration: entries within `1e-9` and an
/// objective no worse than the oracle's plus `1e-9`.
pub fn check_oracle_equivalence(solver: Solver, instances: &[SystemParams]) -> CheckReport {
    let mut report = CheckReport::new("oracle_equivalence");
    let (mut max_diff, mut max_excess) = (0.0f64, f64::NEG_INFINITY);
    for params in instances {
        let got = solver(params);
        let want = oracle_optimal_routing(params);
        let diff = got
            .probabilities()
            .iter()
            .zip(want.probabilities())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let objective = total_mean_queue_for(params, got.probabilities());
        let best =
            total_mean_queue_for(params, want.probabilities()).expect("oracle routing is stable");
        let excess = objective.map(|v| v - best).unwrap_or(f64::INFINITY);
        max_diff = max_diff.max(if diff.is_nan() { f64::INFINITY } else { diff });
        max_excess = max_excess.max(excess);
        report.case(diff <= 1e-9 && excess <= 1e-9);
    }
    report.metric("max_abs_diff", max_diff);
    report.metric("max_objective_excess", max_excess);
    report.finish()
}

/// Monotonicity in the rates, constant normalized residual on the support,
/// and infeasibility of the next larger prefix.
pub fn check_support_lemmas(solver: Solver, instances: &[SystemParams]) -> CheckReport {
    let mut report = CheckReport::new("support_lemmas");
    let (mut monotone_bad, mut residual_bad, mut maximal_bad) = (0u64, 0u64, 0u64);
    let mut max_spread = 0.0f64;
    for params in instances {
        let routing = solver(params);
        let p = routing.probabilities();
        let mu = params.mu();
        let order = rate_order(mu);

        let monotone = order.windows(2).all(|w| p[w[0]] >= p[w[1]]);

        let normalized: Vec<f64> = routing
            .support()
            .iter()
            .map(|&i| (mu[i] - params.lambda() * p[i]) / (mu[i] * (1.0 - mu[i])).sqrt())
            .collect();
        let lo = normalized.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = hi - lo;
        let residual = spread <= 1e-9 * hi.abs().max(1.0);
        max_spread = max_spread.max(if spread.is_nan() {
            f64::INFINITY
        } else {
            spread
        });

        let size = routing.support().len();
        let prefix_matches = {
            let mut prefix = order[..size].to_vec();
            prefix.sort_unstable();
            prefix == routing.support()
        };
        let maximal = prefix_matches
            && (size == order.len() || {
                let next = order[size];
                match routing_for_support(params, &order[..=size]) {
                    Ok(candidate) => candidate[next] <= ZERO_TOLERANCE,
                    Err(_) => true,
                }
            });

        monotone_bad += u64::from(!monotone);
        residual_bad += u64::from(!residual);
        maximal_bad += u64::from(!maximal);
        report.case(monotone && residual && maximal);
    }
    report.metric("monotonicity_violations", monotone_bad);
    report.metric("residual_violations", residual_bad);
    report.metric("maximality_violations", maximal_bad);
    report.metric("max_residual_spread", max_spread);
    report.finish()
}

/// Pearson chi-square p-value of observed counts against probabilities.
pub fn chi_square_p_value(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        let expected = p * n as f64;
        if expected > 0.0 {
            stat += (c as f64 - expected).powi(2) / expected;
            cells += 1;
        } else if c > 0 {
            return 0.0;
        }
    }
    if cells < 2 {
        return 1.0;
    }
    ChiSquared::new((cells - 1) as f64)
        .expect("positive degrees of freedom")
        .sf(stat)
}

fn random_distribution(rng: &mut RandomStream, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k)
        .map(|_| {
            if rng.bernoulli(0.2) {
                0.0
            } else {
                rng.uniform() + 1e-3
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Maximal coupling: disagreement rate within three binomial standard errors
/// of the total variation distance, and both marginals pass a chi-square
/// test at [`CHI_SQUARE_LEVEL`].
pub fn check_maximal_coupling(seed: u64, pairs: usize, draws: u64) -> CheckReport {
    let mut report = CheckReport::new("maximal_coupling");
    let mut rng = check_stream(seed, 2);
    let mut worst_z = 0.0f64;
    let mut min_p_value = 1.0f64;
    for pair in 0..pairs {
        let k = 2 + rng.index(7);
        let p = random_distribution(&mut rng, k);
        let q = random_distribution(&mut rng, k);
        let tv = tv_distance(&p, &q);
        let mut draw_rng =
            RandomStream::new(seed, StreamId::new(pair as u64, Purpose::Coupling, None));
        let (mut cp, mut cq) = (vec![0u64; k], vec![0u64; k]);
        let mut differ = 0u64;
        for _ in 0..draws {
            let (a, b) = sample_maximal_coupling(&p, &q, &mut draw_rng);
            cp[a] += 1;
            cq[b] += 1;
            differ += u64::from(a != b);
        }
        let rate = differ as f64 / draws as f64;
        let se = (tv * (1.0 - tv) / draws as f64).sqrt();
        let tv_ok = (rate - tv).abs() <= 3.0 * se;
        if se > 0.0 {
            worst_z = worst_z.max((rate - tv).abs() / se);
        }
        let pv = chi_square_p_value(&cp, &p).min(chi_square_p_value(&cq, &q));
        min_p_value = min_p_value.min(pv);
        report.case(tv_ok && pv >= CHI_SQUARE_LEVEL);
    }
    report.metric("draws_per_pair", draws);
    report.metric("max_tv_z_score", worst_z);
    report.metric("min_chi_square_p_value", min_p_value);
    report.finish()
}

/// Pinned learner routing: per-server frequency of "learner sends here, genie
/// does not" among exploit arrivals is at most `|p_hat_i - p*_i|` plus three
/// standard errors.
pub fn check_mismatch_bound(solver: Solver, seed: u64, horizon: u64) -> CheckReport {
    let mut report = CheckReport::new("mismatch_bound");
    let cases: [(f64, &[f64], &[f64]); 2] = [
        (0.5, &[0.45, 0.55], &[0.6, 0.4]),
        (0.6, &[0.2, 0.3, 0.5], &[0.1, 0.5, 0.4]),
    ];
    let mut worst_margin = f64::NEG_INFINITY;
    let mut min_exploit = u64::MAX;
    for (lambda, mu, pinned) in cases {
        let params = SystemParams::new(lambda, mu.to_vec()).expect("fixed instance");
        let p_star = solver(&params);
        let spec = PolicySpec::blind(PolicyKind::Pinned(pinned.to_vec())).expect("valid pin");
        let scenario = Scenario::new(params, horizon, spec).expect("valid scenario");
        let run = match run_coupled(&scenario, seed) {
            Ok(run) => run,
            Err(_) => {
                report.case(false);
                continue;
            }
        };
        let d = &run.diagnostics;
        let n = d.exploit_arrivals;
        min_exploit = min_exploit.min(n);
        for (i, (&pin, &star)) in pinned.iter().zip(p_star.probabilities()).enumerate() {
            let gap = (pin - star).abs();
            let freq = d.mismatches[i] as f64 / n as f64;
            let se = (gap.min(1.0) * (1.0 - gap.min(1.0)) / n as f64).sqrt();
            let margin = freq - (gap + 3.0 * se);
            worst_margin = worst_margin.max(margin);
            report.case(n > 0 && margin <= 0.0);
        }
    }
    report.metric("min_exploit_arrivals", min_exploit);
    report.metric("worst_margin", worst_margin);
    report.finish()
}

/// Geometric service time on `{1, 2, ...}` by inversion.
pub fn sample_geometric(rng: &mut RandomStream, mu: f64) -> u64 {
    let u = 1.0 - rng.uniform();
    if mu >= 1.0 {
        return 1;
    }
    (u.ln() / (1.0 - mu).ln()).ceil().max(1.0) as u64
}

/// Empirical tails `P(|mu_hat - mu| >= delta)` against the exponential bound,
/// one-sided with three standard errors of slack.
pub fn check_concentration(seed: u64, trials: u64) -> CheckReport {
    let mut report = CheckReport::new("concentration_tails");
    let mut worst_margin = f64::NEG_INFINITY;
    for (a, &mu) in [0.2, 0.5, 0.8].iter().enumerate() {
        for (b, &n) in [10u64, 100].iter().enumerate() {
            let mut rng = RandomStream::new(
                seed,
                StreamId::new((a * 2 + b) as u64, Purpose::Check, Some(3)),
            );
            let grid: Vec<f64> = (1..=5).map(|j| j as f64 / 5.0 * mu * (1.0 - mu)).collect();
            let mut exceed = vec![0u64; grid.len()];
            for _ in 0..trials {
                let total: u64 = (0..n).map(|_| sample_geometric(&mut rng, mu)).sum();
                let err = (n as f64 / total as f64 - mu).abs();
                for (e, &d) in exceed.iter_mut().zip(&grid) {
                    *e += u64::from(err >= d);
                }
            }
            for (&e, &d) in exceed.iter().zip(&grid) {
                let bound = concentration_bound(n, d, mu).expect("grid inside valid range");
                let freq = e as f64 / trials as f64;
                let se = (freq * (1.0 - freq) / trials as f64).sqrt();
                let margin = freq - (bound + 3.0 * se);
                worst_margin = worst_margin.max(margin);
                report.case(margin <= 0.0);
            }
        }
    }
    report.metric("trials", trials);
    report.metric("worst_margin", worst_margin);
    report.finish()
}

/// Time-average total queue under the genie routing against the closed form
/// evaluated at the solver's routing, relative tolerance 5%.
pub fn check_steady_state(solver: Solver, seed: u64, horizon: u64) -> CheckReport {
    let mut report = CheckReport::new("steady_state");
    let mut worst = 0.0f64;
    let instances = [
        SystemParams::new(0.2, vec![0.45, 0.55]).expect("fixed instance"),
        SystemParams::geometric_rates(0.5, 6, 0.99).expect("fixed instance"),
    ];
    for params in instances {
        let formula = total_mean_queue_for(&params, solver(&params).probabilities());
        let spec = PolicySpec::blind(PolicyKind::GenieOwr).expect("genie spec");
        let scenario = Scenario::new(params, horizon, spec).expect("valid scenario");
        let ok = match (formula, run_single(&scenario, seed)) {
            (Ok(formula), Ok(m)) => {
                let rel = (m.mean_total_queue - formula).abs() / formula;
                worst = worst.max(rel);
                rel <= 0.05
            }
            _ => false,
        };
        report.case(ok);
    }
    report.metric("horizon", horizon);
    report.metric("max_relative_error", worst);
    report.finish()
}

/// Perturbations within half the admissible radius keep the support and move
/// each routing entry by at most `min(c delta, r_i / (4 lambda))`.
pub fn check_sensitivity(
    solver: Solver,
    seed: u64,
    instances: usize,
    perturbations: usize,
) -> CheckReport {
    let mut report = CheckReport::new("sensitivity_lemma");
    let mut rng = check_stream(seed, 4);
    let mut found = 0usize;
    let mut attempts = 0u64;
    let mut worst_ratio = 0.0f64;
    while found < instances && attempts < 100 * instances as u64 {
        attempts += 1;
        let k = 1 + rng.index(6);
        let params = random_instance(&mut rng, k);
        let gap = tolerance_gap_estimate(&params, 1e-7, 64).expect("positive resolution");
        if gap.lo <= 0.0 {
            continue;
        }
        found += 1;
        let constants = sensitivity_constants(&params, &gap);
        let delta = constants.delta_cap / 2.0;
        let p_star = solver(&params);
        let support = p_star.support().to_vec();
        let mut violations = 0u64;
        for _ in 0..perturbations {
            let mu_hat: Vec<f64> = params
                .mu()
                .iter()
                .map(|&m| m + delta * (2.0 * rng.uniform() - 1.0))
                .collect();
            let Ok(perturbed) = SystemParams::new(params.lambda(), mu_hat) else {
                violations += 1;
                continue;
            };
            let p_hat = solver(&perturbed);
            if support_for_rates(params.lambda(), perturbed.mu()).as_deref() != Some(&support[..])
                || p_hat.support() != &support[..]
            {
                violations += 1;
                continue;
            }
            for i in 0..k {
                let err = (p_hat.probabilities()[i] - p_star.probabilities()[i]).abs();
                let bound = constants.bound_p_error(delta, i);
                if bound > 0.0 {
                    worst_ratio = worst_ratio.max(err / bound);
                }
                if err.is_nan() || err > bound {
                    violations += 1;
                }
            }
        }
        report.case(violations == 0);
    }
    if found < instances {
        report.failures += 1;
    }
    report.metric("instances", found);
    report.metric("perturbations_per_instance", perturbations);
    report.metric("max_error_to_bound_ratio", worst_ratio);
    report.finish()
}

/// The genie coupled with itself accumulates exactly zero regret.
pub fn check_zero_regret(seed: u64, seeds: u64, horizon: u64) -> CheckReport {
    let mut report = CheckReport::new("zero_regret");
    let params = SystemParams::geometric_rates(0.5, 6, 0.99).expect("fixed instance");
    let spec = PolicySpec::blind(PolicyKind::GenieOwr).expect("genie spec");
    let scenario = Scenario::new(params, horizon, spec).expect("valid scenario");
    for s in 0..seeds {
        let ok = run_coupled(&scenario, seed.wrapping_add(s))
            .map(|run| run.trace.regret.iter().all(|&r| r == 0))
            .unwrap_or(false);
        report.case(ok);
    }
    report.finish()
}

/// The full suite at its default sizes.
pub fn run_all(solver: Solver, seed: u64) -> Vec<CheckReport> {
    let instances = oracle_instances(seed, 1000, 8);
    vec![
        check_oracle_equivalence(solver, &instances),
        check_support_lemmas(solver, &instances),
        check_maximal_coupling(seed, 20, 1_000_000),
        check_mismatch_bound(solver, seed, 400_000),
        check_concentration(seed, 100_000),
        check_steady_state(solver, seed, 2_000_000),
        check_sensitivity(solver, seed, 100, 100),
        check_zero_regret(seed, 50, 5_000),
    ]
}

/// The production solver.
pub fn reference_solver(params: &SystemParams) -> RoutingVector {
    optimal_routing(params)
}
