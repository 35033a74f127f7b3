//! Discrete-time simulation: single systems and learner/genie coupled pairs.
//!
//! In a coupled run both systems read the same arrival coin and the same
//! offered-service coin per server every slot. Their dispatch decisions are
//! drawn jointly from the maximal coupling of the learner's routing vector and
//! the optimal one, so the two systems diverge only when the learner explores
//! or its routing vector is off. Regret is the running sum of the total queue
//! length difference.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::RateEstimator;
use crate::model::{QueueState, SystemParams};
use crate::policies::{DispatchContext, Dispatcher, Observation, Plan, PolicyKind, PolicySpec};
use crate::rng::{sample_weighted, Purpose, RandomStream, StreamId};
use crate::routing::optimal_routing;

/// Number of checkpoints in the default log-spaced grid.
pub const DEFAULT_CHECKPOINTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub params: SystemParams,
    pub horizon: u64,
    pub policy: PolicySpec,
    /// Per-server Bernoulli cross-traffic invisible to the dispatcher.
    pub external: Option<Vec<f64>>,
    /// Sorted slots in `[1, horizon]` at which cumulative regret is sampled.
    pub checkpoints: Vec<u64>,
}

impl Scenario {
    /// Scenario without cross-traffic on the default checkpoint grid.
    pub fn new(params: SystemParams, horizon: u64, policy: PolicySpec) -> Result<Self> {
        let scenario = Self {
            checkpoints: log_checkpoints(horizon, DEFAULT_CHECKPOINTS),
            params,
            horizon,
            policy,
            external: None,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn with_checkpoints(mut self, checkpoints: Vec<u64>) -> Result<Self> {
        self.checkpoints = checkpoints;
        self.validate()?;
        Ok(self)
    }

    pub fn with_external(mut self, external: Vec<f64>) -> Result<Self> {
        self.external = Some(external);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidScenario(
                "horizon must be at least one slot".into(),
            ));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidScenario(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        if let (Some(&first), Some(&last)) = (self.checkpoints.first(), self.checkpoints.last()) {
            if first < 1 || last > self.horizon {
                return Err(Error::InvalidScenario(format!(
                    "checkpoints must lie in [1, {}]",
                    self.horizon
                )));
            }
        }
        if let Some(ext) = &self.external {
            if ext.len() != self.params.servers() {
                return Err(Error::InvalidScenario(format!(
                    "{} external rates for {} servers",
                    ext.len(),
                    self.params.servers()
                )));
            }
            if ext.iter().any(|&x| !(0.0..1.0).contains(&x)) {
                return Err(Error::InvalidScenario(
                    "external rates must lie in [0, 1)".into(),
                ));
            }
        }
        if let PolicyKind::Pinned(p) = &self.policy.kind {
            if p.len() != self.params.servers() {
                return Err(Error::InvalidScenario(
                    "pinned vector has the wrong length".into(),
                ));
            }
        }
        self.policy.validate()
    }
}

/// Up to `count` distinct, log-spaced slots in `[1, horizon]`, always
/// ending at `horizon`.
pub fn log_checkpoints(horizon: u64, count: usize) -> Vec<u64> {
    if horizon == 0 || count == 0 {
        return Vec::new();
    }
    let mut out: Vec<u64> = (0..count)
        .map(|j| {
            let frac = if count == 1 {
                1.0
            } else {
                j as f64 / (count - 1) as f64
            };
            ((horizon as f64).powf(frac).round() as u64).clamp(1, horizon)
        })
        .collect();
    out.dedup();
    if out.last() != Some(&horizon) {
        out.push(horizon);
    }
    out
}

/// `sum_j max(0, q_j - p_j)`; equals half the L1 distance for distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| (b - a).max(0.0)).sum()
}

/// Draw `(sigma, sigma_star)` with marginals `p_hat` and `p_star` such that
/// `P(sigma != sigma_star)` equals their total variation distance.
///
/// With probability `sum_j min(p_hat_j, p_star_j)` both take a common index
/// drawn from the normalized overlap; otherwise they are drawn independently
/// from the normalized excesses of each vector.
pub fn sample_maximal_coupling(
    p_hat: &[f64],
    p_star: &[f64],
    rng: &mut RandomStream,
) -> (usize, usize) {
    debug_assert_eq!(p_hat.len(), p_star.len());
    let mut overlap = [0.0f64; 16];
    let mut heap;
    let overlap: &mut [f64] = if p_hat.len() <= overlap.len() {
        &mut overlap[..p_hat.len()]
    } else {
        heap = vec![0.0; p_hat.len()];
        &mut heap
    };
    let mut common = 0.0;
    let mut excess_hat = 0.0;
    let mut excess_star = 0.0;
    for i in 0..p_hat.len() {
        let m = p_hat[i].min(p_star[i]);
        overlap[i] = m;
        common += m;
        excess_hat += p_hat[i] - m;
        excess_star += p_star[i] - m;
    }
    let u = rng.uniform();
    if u < common || excess_hat <= 0.0 || excess_star <= 0.0 {
        let i = sample_weighted(overlap, u);
        return (i, i);
    }
    let a = rng.uniform() * excess_hat;
    let b = rng.uniform() * excess_star;
    let sigma = pick_excess(p_hat, p_star, a);
    let sigma_star = pick_excess(p_star, p_hat, b);
    (sigma, sigma_star)
}

fn pick_excess(p: &[f64], other: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for i in 0..p.len() {
        let e = p[i] - p[i].min(other[i]);
        if e > 0.0 {
            acc += e;
            last = i;
            if target < acc {
                return i;
            }
        }
    }
    last
}

/// Slots since each queue was last empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BusyTracker {
    last_empty: Vec<u64>,
    longest: Vec<u64>,
}

impl BusyTracker {
    pub fn new(servers: usize) -> Self {
        Self {
            last_empty: vec![0; servers],
            longest: vec![0; servers],
        }
    }

    /// Record the queue lengths after slot `t`.
    pub fn observe(&mut self, t: u64, q: &[u64]) {
        for (i, &len) in q.iter().enumerate() {
            if len == 0 {
                self.last_empty[i] = t;
            } else {
                self.longest[i] = self.longest[i].max(t - self.last_empty[i]);
            }
        }
    }

    /// `B_i(t) = min { s >= 0 : Q_i(t - s) = 0 }`, for the most recently
    /// observed `t`.
    pub fn busy_period(&self, server: usize, t: u64) -> u64 {
        t - self.last_empty[server]
    }

    pub fn longest(&self) -> &[u64] {
        &self.longest
    }
}

/// Cumulative regret sampled at checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegretTrace {
    pub seed: u64,
    pub checkpoints: Vec<u64>,
    pub regret: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledDiagnostics {
    pub arrivals: u64,
    pub exploit_arrivals: u64,
    pub explore_arrivals: u64,
    pub fallbacks: u64,
    /// Exploit slots where the learner sent a job to server `i` and the
    /// genie did not.
    pub mismatches: Vec<u64>,
    pub learner_exploit_dispatch: Vec<u64>,
    pub learner_explore_dispatch: Vec<u64>,
    pub genie_dispatch: Vec<u64>,
    /// Cumulative learner exploit dispatches per server at each checkpoint.
    pub exploit_dispatch_at_checkpoints: Vec<Vec<u64>>,
    pub learner_departures: u64,
    pub genie_departures: u64,
    pub final_learner_queues: Vec<u64>,
    pub final_genie_queues: Vec<u64>,
    pub final_estimates: Vec<f64>,
    pub final_learner_busy: Vec<u64>,
    pub final_genie_busy: Vec<u64>,
    pub longest_learner_busy: Vec<u64>,
    pub longest_genie_busy: Vec<u64>,
    pub p_star: Vec<f64>,
}

/// Per-slot total queue lengths of both systems, for offline checks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct CoupledPaths {
    pub learner_total: Vec<u64>,
    pub genie_total: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledRun {
    pub trace: RegretTrace,
    pub diagnostics: CoupledDiagnostics,
    pub paths: Option<CoupledPaths>,
}

/// Tracks the slot at which each head-of-line job reached the head.
#[derive(Debug, Clone)]
struct HeadClock {
    since: Vec<Option<u64>>,
}

impl HeadClock {
    fn new(servers: usize) -> Self {
        Self {
            since: vec![None; servers],
        }
    }

    /// Called after a step; returns service times of departed jobs through
    /// `record`.
    fn advance(
        &mut self,
        t: u64,
        before: &[u64],
        arrivals: &[u32],
        departed: &[bool],
        after: &[u64],
        mut record: impl FnMut(usize, u64),
    ) {
        for i in 0..self.since.len() {
            if before[i] + u64::from(arrivals[i]) > 0 && self.since[i].is_none() {
                self.since[i] = Some(t);
            }
            if departed[i] {
                let start = self.since[i].expect("departure without a head-of-line job");
                record(i, t - start + 1);
                self.since[i] = if after[i] > 0 { Some(t + 1) } else { None };
            }
        }
    }
}

struct Streams {
    arrival: RandomStream,
    service: Vec<RandomStream>,
    explore: RandomStream,
    target: RandomStream,
    coupling: RandomStream,
    policy: RandomStream,
}

impl Streams {
    fn new(seed: u64, servers: usize) -> Self {
        let g = |p| RandomStream::new(seed, StreamId::global(p));
        Self {
            arrival: g(Purpose::Arrival),
            service: (0..servers)
                .map(|i| RandomStream::new(seed, StreamId::server(Purpose::Service, i)))
                .collect(),
            explore: g(Purpose::Explore),
            target: g(Purpose::ExploreTarget),
            coupling: g(Purpose::Coupling),
            policy: g(Purpose::Policy),
        }
    }
}

/// Run the learner and the genie side by side on shared randomness.
pub fn run_coupled(scenario: &Scenario, seed: u64) -> Result<CoupledRun> {
    run_coupled_with(scenario, seed, false)
}

/// [`run_coupled`], optionally storing per-slot total queue lengths.
pub fn run_coupled_with(scenario: &Scenario, seed: u64, record_paths: bool) -> Result<CoupledRun> {
    scenario.validate()?;
    if scenario.policy.kind.is_queue_aware() {
        return Err(Error::InvalidScenario(
            "queue-aware policies run uncoupled (use run_single)".into(),
        ));
    }
    if scenario.external.is_some() {
        return Err(Error::InvalidScenario(
            "cross-traffic scenarios run uncoupled (use run_single)".into(),
        ));
    }
    let params = &scenario.params;
    let k = params.servers();
    let lambda = params.lambda();
    let mu = params.mu();
    let p_star = optimal_routing(params).probabilities().to_vec();
    let mut rng = Streams::new(seed, k);
    let mut dispatcher = Dispatcher::new(scenario.policy.clone());
    let true_mu = scenario.policy.kind.uses_true_rates().then_some(mu);

    let mut learner = QueueState::empty(k);
    let mut genie = QueueState::empty(k);
    let mut estimator = RateEstimator::new(k);
    let mut clock = HeadClock::new(k);
    let mut learner_busy = BusyTracker::new(k);
    let mut genie_busy = BusyTracker::new(k);

    let mut offered = vec![false; k];
    let mut learner_in = vec![0u32; k];
    let mut genie_in = vec![0u32; k];
    let mut learner_out = vec![false; k];
    let mut genie_out = vec![false; k];
    let mut before = vec![0u64; k];

    let mut diag = CoupledDiagnostics {
        arrivals: 0,
        exploit_arrivals: 0,
        explore_arrivals: 0,
        fallbacks: 0,
        mismatches: vec![0; k],
        learner_exploit_dispatch: vec![0; k],
        learner_explore_dispatch: vec![0; k],
        genie_dispatch: vec![0; k],
        exploit_dispatch_at_checkpoints: Vec::with_capacity(scenario.checkpoints.len()),
        learner_departures: 0,
        genie_departures: 0,
        final_learner_queues: Vec::new(),
        final_genie_queues: Vec::new(),
        final_estimates: Vec::new(),
        final_learner_busy: Vec::new(),
        final_genie_busy: Vec::new(),
        longest_learner_busy: Vec::new(),
        longest_genie_busy: Vec::new(),
        p_star: p_star.clone(),
    };
    let mut paths = record_paths.then(|| CoupledPaths {
        learner_total: Vec::with_capacity(scenario.horizon as usize),
        genie_total: Vec::with_capacity(scenario.horizon as usize),
    });

    let mut regret: i64 = 0;
    let mut trace = Vec::with_capacity(scenario.checkpoints.len());
    let mut next_checkpoint = scenario.checkpoints.iter().copied().peekable();

    for t in 1..=scenario.horizon {
        learner_in.fill(0);
        genie_in.fill(0);
        let arrival = rng.arrival.bernoulli(lambda);
        for (i, s) in rng.service.iter_mut().enumerate() {
            offered[i] = s.bernoulli(mu[i]);
        }

        if arrival {
            diag.arrivals += 1;
            let coin = rng.explore.uniform();
            let ctx = DispatchContext {
                t,
                lambda,
                true_mu,
                estimator: &estimator,
                observed: None,
            };
            match dispatcher.plan(&ctx, coin, &mut rng.policy) {
                Plan::Route(p_hat) => {
                    let (sigma, sigma_star) =
                        sample_maximal_coupling(&p_hat, &p_star, &mut rng.coupling);
                    diag.exploit_arrivals += 1;
                    diag.learner_exploit_dispatch[sigma] += 1;
                    if sigma != sigma_star {
                        diag.mismatches[sigma] += 1;
                    }
                    learner_in[sigma] = 1;
                    genie_in[sigma_star] = 1;
                }
                Plan::Explore | Plan::Fallback => {
                    let sigma = rng.target.index(k);
                    let sigma_star = rng.coupling.categorical(&p_star);
                    diag.explore_arrivals += 1;
                    diag.learner_explore_dispatch[sigma] += 1;
                    learner_in[sigma] = 1;
                    genie_in[sigma_star] = 1;
                }
            }
            let star = genie_in
                .iter()
                .position(|&a| a == 1)
                .expect("genie dispatched");
            diag.genie_dispatch[star] += 1;
        }

        before.copy_from_slice(learner.lengths());
        diag.learner_departures += learner.step_into(&learner_in, &offered, &mut learner_out);
        diag.genie_departures += genie.step_into(&genie_in, &offered, &mut genie_out);
        clock.advance(
            t,
            &before,
            &learner_in,
            &learner_out,
            learner.lengths(),
            |i, x| estimator.record_departure(i, x),
        );
        learner_busy.observe(t, learner.lengths());
        genie_busy.observe(t, genie.lengths());

        let (lt, gt) = (learner.total(), genie.total());
        if diag.arrivals != diag.learner_departures + lt
            || diag.arrivals != diag.genie_departures + gt
        {
            return Err(Error::InvalidScenario(format!(
                "conservation violated at slot {t}: arrivals {}, learner {} + {}, genie {} + {}",
                diag.arrivals, diag.learner_departures, lt, diag.genie_departures, gt
            )));
        }
        regret += lt as i64 - gt as i64;
        if let Some(p) = paths.as_mut() {
            p.learner_total.push(lt);
            p.genie_total.push(gt);
        }
        if next_checkpoint.peek() == Some(&t) {
            next_checkpoint.next();
            trace.push(regret);
            diag.exploit_dispatch_at_checkpoints
                .push(diag.learner_exploit_dispatch.clone());
        }
    }

    let end = scenario.horizon;
    diag.fallbacks = dispatcher.fallbacks();
    diag.final_learner_queues = learner.lengths().to_vec();
    diag.final_genie_queues = genie.lengths().to_vec();
    diag.final_estimates = estimator.estimates();
    diag.final_learner_busy = (0..k).map(|i| learner_busy.busy_period(i, end)).collect();
    diag.final_genie_busy = (0..k).map(|i| genie_busy.busy_period(i, end)).collect();
    diag.longest_learner_busy = learner_busy.longest().to_vec();
    diag.longest_genie_busy = genie_busy.longest().to_vec();

    Ok(CoupledRun {
        trace: RegretTrace {
            seed,
            checkpoints: scenario.checkpoints.clone(),
            regret: trace,
        },
        diagnostics: diag,
        paths,
    })
}

/// Long-run metrics of one uncoupled system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleRunMetrics {
    pub seed: u64,
    pub horizon: u64,
    /// Time average of the post-slot total queue length (all jobs).
    pub mean_total_queue: f64,
    pub mean_queue: Vec<f64>,
    /// Fraction of slots each server had work.
    pub utilization: Vec<f64>,
    /// Mean sojourn in slots of completed dispatcher jobs (arrival slot
    /// counts as one slot).
    pub mean_response_time: f64,
    /// Mean sojourn over all completed jobs including cross-traffic.
    pub mean_response_time_all: f64,
    pub dispatched: u64,
    pub completed_dispatched: u64,
    pub dispatch_fraction: Vec<f64>,
    pub fallbacks: u64,
    pub final_estimates: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    arrived: u64,
    own: bool,
}

/// Simulate one system under the scenario's policy, with optional
/// cross-traffic and partial or delayed queue observation.
pub fn run_single(scenario: &Scenario, seed: u64) -> Result<SingleRunMetrics> {
    scenario.validate()?;
    let params = &scenario.params;
    let k = params.servers();
    let lambda = params.lambda();
    let mu = params.mu();
    let external = scenario.external.clone().unwrap_or_else(|| vec![0.0; k]);
    let kind = &scenario.policy.kind;
    // With cross-traffic the genie routes on the capacity left over.
    let effective: Vec<f64> = mu.iter().zip(&external).map(|(m, e)| m - e).collect();
    let true_view: Option<&[f64]> = match kind {
        PolicyKind::GenieOwr => Some(&effective),
        PolicyKind::JoinFastestShortestQueue => Some(mu),
        _ => None,
    };

    let mut rng = Streams::new(seed, k);
    let mut ext_rng: Vec<RandomStream> = (0..k)
        .map(|i| RandomStream::new(seed, StreamId::server(Purpose::ExternalArrival, i)))
        .collect();
    let mut obs_rng = RandomStream::new(seed, StreamId::global(Purpose::Observation));
    let mut dispatcher = Dispatcher::new(scenario.policy.clone());

    let mut state = QueueState::empty(k);
    let mut fifo: Vec<VecDeque<Job>> = vec![VecDeque::new(); k];
    let mut own = vec![0u64; k];
    let mut snapshot = vec![0u64; k];
    let mut estimator = RateEstimator::new(k);
    let mut clock = HeadClock::new(k);

    let mut arrivals = vec![0u32; k];
    let mut offered = vec![false; k];
    let mut departed = vec![false; k];
    let mut before = vec![0u64; k];
    let mut own_out = vec![false; k];

    let mut queue_area = vec![0u128; k];
    let mut busy_slots = vec![0u64; k];
    let mut dispatch = vec![0u64; k];
    let (mut own_done, mut own_sojourn) = (0u64, 0u128);
    let (mut all_done, mut all_sojourn) = (0u64, 0u128);

    for t in 1..=scenario.horizon {
        arrivals.fill(0);
        if let Observation::Delayed(q) = scenario.policy.observation {
            if t == 1 || obs_rng.bernoulli(q) {
                snapshot.copy_from_slice(state.lengths());
            }
        }
        let arrival = rng.arrival.bernoulli(lambda);
        for (i, s) in rng.service.iter_mut().enumerate() {
            offered[i] = s.bernoulli(mu[i]);
        }
        for i in 0..k {
            if ext_rng[i].bernoulli(external[i]) {
                arrivals[i] += 1;
                fifo[i].push_back(Job {
                    arrived: t,
                    own: false,
                });
            }
        }
        if arrival {
            let observed: Option<&[u64]> = match scenario.policy.observation {
                Observation::None => None,
                Observation::Full => Some(state.lengths()),
                Observation::OwnJobsOnly => Some(&own),
                Observation::Delayed(_) => Some(&snapshot),
            };
            let ctx = DispatchContext {
                t,
                lambda,
                true_mu: true_view,
                estimator: &estimator,
                observed,
            };
            let coin = rng.explore.uniform();
            let target = match dispatcher.plan(&ctx, coin, &mut rng.policy) {
                Plan::Route(p) => rng.coupling.categorical(&p),
                Plan::Explore | Plan::Fallback => rng.target.index(k),
            };
            arrivals[target] += 1;
            dispatch[target] += 1;
            own[target] += 1;
            fifo[target].push_back(Job {
                arrived: t,
                own: true,
            });
        }

        before.copy_from_slice(state.lengths());
        state.step_into(&arrivals, &offered, &mut departed);
        own_out.fill(false);
        for i in 0..k {
            if before[i] + u64::from(arrivals[i]) > 0 {
                busy_slots[i] += 1;
            }
            if departed[i] {
                let job = fifo[i].pop_front().expect("departure from an empty queue");
                let sojourn = u128::from(t - job.arrived + 1);
                all_done += 1;
                all_sojourn += sojourn;
                if job.own {
                    own[i] -= 1;
                    own_done += 1;
                    own_sojourn += sojourn;
                    own_out[i] = true;
                }
            }
            queue_area[i] += u128::from(state.lengths()[i]);
        }
        clock.advance(t, &before, &arrivals, &departed, state.lengths(), |i, x| {
            if own_out[i] {
                estimator.record_departure(i, x)
            }
        });
    }

    let horizon = scenario.horizon as f64;
    let mean_queue: Vec<f64> = queue_area.iter().map(|&a| a as f64 / horizon).collect();
    let dispatched: u64 = dispatch.iter().sum();
    Ok(SingleRunMetrics {
        seed,
        horizon: scenario.horizon,
        mean_total_queue: mean_queue.iter().sum(),
        mean_queue,
        utilization: busy_slots.iter().map(|&b| b as f64 / horizon).collect(),
        mean_response_time: ratio(own_sojourn, own_done),
        mean_response_time_all: ratio(all_sojourn, all_done),
        dispatched,
        completed_dispatched: own_done,
        dispatch_fraction: dispatch
            .iter()
            .map(|&d| {
                if dispatched == 0 {
                    0.0
                } else {
                    d as f64 / dispatched as f64
                }
            })
            .collect(),
        fallbacks: dispatcher.fallbacks(),
        final_estimates: estimator.estimates(),
    })
}

fn ratio(num: u128, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::geo_mean_queue;

    fn two_server() -> SystemParams {
        SystemParams::new(0.2, vec![0.45, 0.55]).unwrap()
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!((tv_distance(&[0.3, 0.7], &[0.25, 0.75]) - 0.05).abs() < 1e-15);
        assert!((tv_distance(&[0.25, 0.75], &[0.3, 0.7]) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn coupling_edge_cases() {
        let mut rng = RandomStream::new(1, StreamId::global(Purpose::Check));
        for _ in 0..10_000 {
            let (a, b) = sample_maximal_coupling(&[0.3, 0.7], &[0.3, 0.7], &mut rng);
            assert_eq!(a, b);
            assert_eq!(
                sample_maximal_coupling(&[1.0, 0.0], &[0.0, 1.0], &mut rng),
                (0, 1)
            );
        }
    }

    #[test]
    fn coupling_mismatch_rate() {
        let mut rng = RandomStream::new(2, StreamId::global(Purpose::Check));
        let n = 1_000_000;
        let mut diff = 0u64;
        let mut hat = [0u64; 2];
        let mut star = [0u64; 2];
        for _ in 0..n {
            let (a, b) = sample_maximal_coupling(&[0.3, 0.7], &[0.25, 0.75], &mut rng);
            diff += u64::from(a != b);
            hat[a] += 1;
            star[b] += 1;
        }
        let rate = diff as f64 / n as f64;
        let se = (0.05f64 * 0.95 / n as f64).sqrt();
        assert!((rate - 0.05).abs() <= 3.0 * se, "{rate}");
        assert!((hat[0] as f64 / n as f64 - 0.3).abs() < 0.002);
        assert!((star[0] as f64 / n as f64 - 0.25).abs() < 0.002);
    }

    #[test]
    fn busy_period_trace() {
        let mut b = BusyTracker::new(1);
        for (t, q) in [(1, 0), (2, 1), (3, 2), (4, 1)] {
            b.observe(t, &[q]);
        }
        assert_eq!(b.busy_period(0, 4), 3);
        b.observe(5, &[0]);
        assert_eq!(b.busy_period(0, 5), 0);
        assert_eq!(b.longest(), &[3]);
    }

    #[test]
    fn checkpoint_grid() {
        let c = log_checkpoints(100_000, 64);
        assert_eq!(c[0], 1);
        assert_eq!(*c.last().unwrap(), 100_000);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c.len() <= 64);
        assert_eq!(log_checkpoints(1, 64), vec![1]);
    }

    #[test]
    fn scenario_validation() {
        let spec = PolicySpec::blind(PolicyKind::EpsLogT).unwrap();
        assert!(Scenario::new(two_server(), 0, spec.clone()).is_err());
        let s = Scenario::new(two_server(), 10, spec.clone()).unwrap();
        assert!(s.clone().with_checkpoints(vec![0, 5]).is_err());
        assert!(s.clone().with_checkpoints(vec![5, 5]).is_err());
        assert!(s.clone().with_checkpoints(vec![5, 11]).is_err());
        assert!(s.clone().with_external(vec![0.1]).is_err());
        let jsq = PolicySpec::new(PolicyKind::JoinShortestQueue, Observation::Full).unwrap();
        let s = Scenario::new(two_server(), 10, jsq).unwrap();
        assert!(run_coupled(&s, 1).is_err());
    }

    #[test]
    fn genie_against_itself_has_zero_regret() {
        let spec = PolicySpec::blind(PolicyKind::GenieOwr).unwrap();
        let s = Scenario::new(two_server(), 20_000, spec).unwrap();
        let run = run_coupled_with(&s, 9, true).unwrap();
        assert!(run.trace.regret.iter().all(|&r| r == 0));
        let paths = run.paths.unwrap();
        assert_eq!(paths.learner_total, paths.genie_total);
        assert_eq!(run.diagnostics.mismatches, vec![0, 0]);
    }

    #[test]
    fn regret_equals_sum_of_path_differences() {
        let spec = PolicySpec::blind(PolicyKind::EpsLogT).unwrap();
        let s = Scenario::new(two_server(), 30_000, spec).unwrap();
        let run = run_coupled_with(&s, 5, true).unwrap();
        let paths = run.paths.unwrap();
        for (&c, &r) in run.trace.checkpoints.iter().zip(&run.trace.regret) {
            let sum: i64 = (0..c as usize)
                .map(|j| paths.learner_total[j] as i64 - paths.genie_total[j] as i64)
                .sum();
            assert_eq!(sum, r);
        }
    }

    #[test]
    fn coupled_run_is_deterministic() {
        let spec = PolicySpec::blind(PolicyKind::Thompson).unwrap();
        let s = Scenario::new(two_server(), 10_000, spec).unwrap();
        assert_eq!(run_coupled(&s, 3).unwrap(), run_coupled(&s, 3).unwrap());
    }

    #[test]
    fn single_server_mean_queue() {
        let params = SystemParams::new(0.2, vec![0.55]).unwrap();
        let s = Scenario::new(
            params,
            1_000_000,
            PolicySpec::blind(PolicyKind::GenieOwr).unwrap(),
        )
        .unwrap();
        let m = run_single(&s, 11).unwrap();
        let expected = geo_mean_queue(0.2, 0.55).unwrap();
        assert!(
            (m.mean_total_queue / expected - 1.0).abs() < 0.05,
            "{}",
            m.mean_total_queue
        );
        // Post-slot queues miss each job's final slot: E[Q] = lambda (E[T] - 1).
        let little = 0.2 * (m.mean_response_time - 1.0);
        assert!((little / m.mean_total_queue - 1.0).abs() < 0.02, "{little}");
    }

    #[test]
    fn light_load_is_small() {
        let params = SystemParams::new(0.001, vec![0.45, 0.55]).unwrap();
        let s = Scenario::new(
            params.clone(),
            200_000,
            PolicySpec::blind(PolicyKind::GenieOwr).unwrap(),
        )
        .unwrap();
        let m = run_single(&s, 12).unwrap();
        let formula = crate::model::total_mean_queue(&params, &optimal_routing(&params)).unwrap();
        assert!(formula < 0.002);
        assert!((m.mean_total_queue - formula).abs() < 0.002);
    }

    #[test]
    fn jsq_with_cross_traffic_runs() {
        let params = SystemParams::geometric_rates(0.2, 6, 0.99).unwrap();
        let ext: Vec<f64> = params.mu().iter().map(|m| m / 2.0).collect();
        for obs in [
            Observation::Full,
            Observation::OwnJobsOnly,
            Observation::Delayed(1.0 / 3.0),
        ] {
            let spec = PolicySpec::new(PolicyKind::JoinShortestQueue, obs).unwrap();
            let s = Scenario::new(params.clone(), 50_000, spec)
                .unwrap()
                .with_external(ext.clone())
                .unwrap();
            let m = run_single(&s, 1).unwrap();
            assert!(m.mean_response_time >= 1.0);
            assert!(m.dispatched > 0);
        }
    }
}
