//! Dispatch policies.
//!
//! A policy turns a [`DispatchContext`] into either an exploration step
//! (uniform over servers) or a routing distribution to sample from. Learner
//! policies only ever see the estimator; the true rates are present in the
//! context solely for the genie and for the queue-aware baselines that are
//! configured to break ties with them.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Beta, Distribution};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::RateEstimator;
use crate::model::SystemParams;
use crate::rng::RandomStream;
use crate::routing::optimal_routing;

/// Rates handed to the routing solver are clamped into this closed range;
/// the closed form needs rates strictly inside (0, 1).
pub const RATE_FLOOR: f64 = 1e-9;
pub const RATE_CEILING: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PolicyKind {
    /// Optimal weighted random routing with the true rates.
    GenieOwr,
    /// Explore with probability `min(1, K ln t / t)`.
    EpsLogT,
    /// Explore with probability `min(1, K / t)`.
    EpsOneOverT,
    /// Route on optimistic rates `mu_hat + 1 / sqrt(N)`.
    Ucb,
    /// Route on rates drawn from per-server Beta posteriors.
    Thompson,
    UniformRandom,
    /// Uniform for the first `n` slots, then always exploit.
    ExploreThenExploit(u64),
    JoinShortestQueue,
    /// Shortest observed queue, ties toward the fastest server.
    JoinFastestShortestQueue,
    /// Always exploit a fixed routing vector. Used to pin the learner's
    /// distribution in coupling diagnostics.
    Pinned(Vec<f64>),
}

impl PolicyKind {
    pub fn is_queue_aware(&self) -> bool {
        matches!(
            self,
            PolicyKind::JoinShortestQueue | PolicyKind::JoinFastestShortestQueue
        )
    }

    /// Whether decisions may depend on the true service rates.
    pub fn uses_true_rates(&self) -> bool {
        matches!(
            self,
            PolicyKind::GenieOwr | PolicyKind::JoinFastestShortestQueue
        )
    }

    /// Exploration probability at slot `t >= 1` with `k` servers.
    pub fn exploration_prob(&self, t: u64, k: usize) -> f64 {
        match self {
            PolicyKind::EpsLogT => exploration_prob(t, k),
            PolicyKind::EpsOneOverT => (k as f64 / t.max(1) as f64).min(1.0),
            PolicyKind::UniformRandom => 1.0,
            PolicyKind::ExploreThenExploit(n) if t <= *n => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::GenieOwr => f.write_str("owr"),
            PolicyKind::EpsLogT => f.write_str("eps-klnt"),
            PolicyKind::EpsOneOverT => f.write_str("eps-kt"),
            PolicyKind::Ucb => f.write_str("ucb"),
            PolicyKind::Thompson => f.write_str("ts"),
            PolicyKind::UniformRandom => f.write_str("uniform"),
            PolicyKind::ExploreThenExploit(n) => write!(f, "fixed:{n}"),
            PolicyKind::JoinShortestQueue => f.write_str("jsq"),
            PolicyKind::JoinFastestShortestQueue => f.write_str("jfsq"),
            PolicyKind::Pinned(p) => {
                f.write_str("pinned:")?;
                for (i, x) in p.iter().enumerate() {
                    if i > 0 {
                        f.write_str("/")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "owr" => PolicyKind::GenieOwr,
            "eps-klnt" => PolicyKind::EpsLogT,
            "eps-kt" => PolicyKind::EpsOneOverT,
            "ucb" => PolicyKind::Ucb,
            "ts" => PolicyKind::Thompson,
            "uniform" => PolicyKind::UniformRandom,
            "jsq" => PolicyKind::JoinShortestQueue,
            "jfsq" => PolicyKind::JoinFastestShortestQueue,
            _ => {
                if let Some(n) = s.strip_prefix("fixed:") {
                    let n = n.parse().map_err(|_| {
                        Error::InvalidParams(format!("bad exploration length in {s:?}"))
                    })?;
                    PolicyKind::ExploreThenExploit(n)
                } else if let Some(p) = s.strip_prefix("pinned:") {
                    let p = p
                        .split('/')
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::InvalidParams(format!("bad pinned vector {s:?}")))?;
                    PolicyKind::Pinned(p)
                } else {
                    return Err(Error::InvalidParams(format!("unknown policy {s:?}")));
                }
            }
        })
    }
}

/// What the dispatcher can see of the queues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Observation {
    None,
    Full,
    /// Only jobs this dispatcher sent and that have not yet departed.
    OwnJobsOnly,
    /// The full snapshot refreshes with the given probability each slot.
    Delayed(f64),
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observation::None => f.write_str("none"),
            Observation::Full => f.write_str("full"),
            Observation::OwnJobsOnly => f.write_str("own"),
            Observation::Delayed(q) => write!(f, "delayed:{q}"),
        }
    }
}

impl FromStr for Observation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let s = s.strip_prefix("obs=").unwrap_or(s);
        match s {
            "none" => Ok(Observation::None),
            "full" => Ok(Observation::Full),
            "own" => Ok(Observation::OwnJobsOnly),
            _ => {
                let q = s
                    .strip_prefix("delayed:")
                    .and_then(|q| q.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidParams(format!("unknown observation {s:?}")))?;
                if !(q > 0.0 && q <= 1.0) {
                    return Err(Error::InvalidParams(format!(
                        "refresh probability {q} must lie in (0, 1]"
                    )));
                }
                Ok(Observation::Delayed(q))
            }
        }
    }
}

/// How learners treat servers that have no completed jobs yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum WarmStart {
    /// Unsampled servers are estimated at rate 1.
    #[default]
    Optimistic,
    /// Dispatch uniformly until every server has completed a job.
    UniformUntilSampled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub observation: Observation,
    pub warm_start: WarmStart,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind, observation: Observation) -> Result<Self> {
        let spec = Self {
            kind,
            observation,
            warm_start: WarmStart::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A queue-agnostic policy.
    pub fn blind(kind: PolicyKind) -> Result<Self> {
        Self::new(kind, Observation::None)
    }

    pub fn with_warm_start(mut self, warm_start: WarmStart) -> Self {
        self.warm_start = warm_start;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let aware = self.kind.is_queue_aware();
        match (aware, self.observation) {
            (true, Observation::None) => Err(Error::InvalidParams(format!(
                "{} needs a queue observation model",
                self.kind
            ))),
            (false, obs) if obs != Observation::None => Err(Error::InvalidParams(format!(
                "{} does not observe queues (got obs={obs})",
                self.kind
            ))),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.observation {
            Observation::None => self.kind.to_string(),
            obs => format!("{}+obs={obs}", self.kind),
        }
    }
}

/// Everything a policy may look at when an arrival must be dispatched.
#[derive(Debug, Clone, Copy)]
pub struct DispatchContext<'a> {
    pub t: u64,
    pub lambda: f64,
    /// Present only for policies that are allowed to know the true rates.
    pub true_mu: Option<&'a [f64]>,
    pub estimator: &'a RateEstimator,
    /// Queue lengths as seen through the observation model.
    pub observed: Option<&'a [u64]>,
}

impl DispatchContext<'_> {
    pub fn servers(&self) -> usize {
        self.estimator.servers()
    }
}

/// `min(1, K ln t / t)`, with the first slot always exploring.
pub fn exploration_prob(t: u64, k: usize) -> f64 {
    if t <= 1 {
        return 1.0;
    }
    let t = t as f64;
    (k as f64 * t.ln() / t).min(1.0)
}

fn clamp_rate(x: f64) -> f64 {
    x.clamp(RATE_FLOOR, RATE_CEILING)
}

/// Optimistic rates `mu_hat_i + 1 / sqrt(max(N_i, 1))`, clamped.
pub fn ucb_rates(est: &RateEstimator) -> Vec<f64> {
    (0..est.servers())
        .map(|i| {
            let n = est.departures(i).max(1) as f64;
            clamp_rate(est.estimate(i) + 1.0 / n.sqrt())
        })
        .collect()
}

/// One draw per server from Beta(mu_hat N + 1, (1 - mu_hat) N + 1), clamped.
pub fn ts_rates(est: &RateEstimator, rng: &mut RandomStream) -> Vec<f64> {
    (0..est.servers())
        .map(|i| {
            let n = est.departures(i) as f64;
            let m = if est.departures(i) == 0 {
                0.0
            } else {
                est.estimate(i)
            };
            let beta = Beta::new(m * n + 1.0, (1.0 - m) * n + 1.0)
                .expect("beta parameters are at least one");
            clamp_rate(beta.sample(rng))
        })
        .collect()
}

/// Point estimates, clamped for the routing solver.
pub fn estimated_rates(est: &RateEstimator) -> Vec<f64> {
    est.estimates().into_iter().map(clamp_rate).collect()
}

/// Optimal routing for a rate vector, or `None` when the rates cannot carry
/// the load.
pub fn routing_for_rates(lambda: f64, rates: &[f64]) -> Option<Vec<f64>> {
    let params = SystemParams::new(lambda, rates.to_vec()).ok()?;
    Some(optimal_routing(&params).probabilities().to_vec())
}

/// What the policy wants to do with the current arrival.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Explore,
    Route(Vec<f64>),
    /// The policy's rate vector could not carry the load; dispatch uniformly.
    Fallback,
}

/// Stateful wrapper that caches routing vectors between estimator updates
/// and counts fallbacks.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    spec: PolicySpec,
    cached: Option<(u64, Vec<f64>)>,
    fallbacks: u64,
}

impl Dispatcher {
    pub fn new(spec: PolicySpec) -> Self {
        Self {
            spec,
            cached: None,
            fallbacks: 0,
        }
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn fallbacks(&self) -> u64 {
        self.fallbacks
    }

    /// Exploration probability at the context's slot, including the
    /// uniform warm start when configured.
    pub fn exploration_prob(&self, ctx: &DispatchContext<'_>) -> f64 {
        let learner = !self.spec.kind.uses_true_rates() && !self.spec.kind.is_queue_aware();
        if learner
            && !matches!(self.spec.kind, PolicyKind::Pinned(_))
            && self.spec.warm_start == WarmStart::UniformUntilSampled
            && !ctx.estimator.all_sampled()
        {
            return 1.0;
        }
        self.spec.kind.exploration_prob(ctx.t, ctx.servers())
    }

    /// Routing distribution used when not exploring.
    pub fn exploit_distribution(
        &mut self,
        ctx: &DispatchContext<'_>,
        rng: &mut RandomStream,
    ) -> Option<Vec<f64>> {
        let k = ctx.servers();
        let version: u64 = ctx.estimator.counts().iter().sum();
        let cacheable = matches!(
            self.spec.kind,
            PolicyKind::GenieOwr
                | PolicyKind::EpsLogT
                | PolicyKind::EpsOneOverT
                | PolicyKind::Ucb
                | PolicyKind::ExploreThenExploit(_)
                | PolicyKind::UniformRandom
                | PolicyKind::Pinned(_)
        );
        if cacheable {
            if let Some((v, p)) = &self.cached {
                if *v == version {
                    return Some(p.clone());
                }
            }
        }
        let dist = match &self.spec.kind {
            PolicyKind::GenieOwr => {
                let mu = ctx.true_mu.expect("genie policy requires the true rates");
                routing_for_rates(ctx.lambda, mu)
            }
            PolicyKind::EpsLogT | PolicyKind::EpsOneOverT | PolicyKind::ExploreThenExploit(_) => {
                routing_for_rates(ctx.lambda, &estimated_rates(ctx.estimator))
            }
            PolicyKind::UniformRandom => Some(vec![1.0 / k as f64; k]),
            PolicyKind::Ucb => routing_for_rates(ctx.lambda, &ucb_rates(ctx.estimator)),
            PolicyKind::Thompson => routing_for_rates(ctx.lambda, &ts_rates(ctx.estimator, rng)),
            PolicyKind::Pinned(p) => Some(p.clone()),
            PolicyKind::JoinShortestQueue => Some(shortest_queue_distribution(
                ctx.observed
                    .expect("queue-aware policy without observation"),
                None,
            )),
            PolicyKind::JoinFastestShortestQueue => {
                let rates = match ctx.true_mu {
                    Some(mu) => mu.to_vec(),
                    None => ctx.estimator.estimates(),
                };
                Some(shortest_queue_distribution(
                    ctx.observed
                        .expect("queue-aware policy without observation"),
                    Some(&rates),
                ))
            }
        };
        if cacheable {
            if let Some(p) = &dist {
                self.cached = Some((version, p.clone()));
            }
        }
        dist
    }

    /// Resolve the plan for one arrival. `explore_coin` is a uniform draw on
    /// `[0, 1)` compared against the exploration probability.
    pub fn plan(
        &mut self,
        ctx: &DispatchContext<'_>,
        explore_coin: f64,
        rng: &mut RandomStream,
    ) -> Plan {
        if explore_coin < self.exploration_prob(ctx) {
            return Plan::Explore;
        }
        match self.exploit_distribution(ctx, rng) {
            Some(p) => Plan::Route(p),
            None => {
                self.fallbacks += 1;
                Plan::Fallback
            }
        }
    }
}

/// Uniform over the argmin of `observed`, or, with `rates`, the fastest
/// server among the argmin (lowest index on exact ties).
pub fn shortest_queue_distribution(observed: &[u64], rates: Option<&[f64]>) -> Vec<f64> {
    let k = observed.len();
    let min = *observed.iter().min().expect("at least one server");
    let ties: Vec<usize> = (0..k).filter(|&i| observed[i] == min).collect();
    let mut p = vec![0.0; k];
    match rates {
        Some(rates) => {
            let best = ties
                .iter()
                .copied()
                .fold(ties[0], |b, i| if rates[i] > rates[b] { i } else { b });
            p[best] = 1.0;
        }
        None => {
            for &i in &ties {
                p[i] = 1.0 / ties.len() as f64;
            }
        }
    }
    p
}

/// Single-shot dispatch decision: exploration coin, then either a uniform
/// server or a draw from the routing distribution. Infeasible rate vectors
/// fall back to uniform.
pub fn decide(spec: &PolicySpec, ctx: &DispatchContext<'_>, rng: &mut RandomStream) -> usize {
    let mut dispatcher = Dispatcher::new(spec.clone());
    let coin = rng.uniform();
    match dispatcher.plan(ctx, coin, rng) {
        Plan::Route(p) => rng.categorical(&p),
        Plan::Explore | Plan::Fallback => rng.index(ctx.servers()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamId};

    fn rng(seed: u64) -> RandomStream {
        RandomStream::new(seed, StreamId::global(Purpose::Check))
    }

    #[test]
    fn exploration_probability() {
        assert_eq!(exploration_prob(1, 6), 1.0);
        assert_eq!(exploration_prob(2, 6), 1.0);
        assert!((exploration_prob(3, 1) - 3f64.ln() / 3.0).abs() < 1e-15);
        assert!((exploration_prob(3, 1) - 0.3662).abs() < 1e-4);
        let v = exploration_prob(1_000_000, 6);
        assert!((v - 6.0 * 1e6f64.ln() / 1e6).abs() < 1e-18);
        assert!((v - 8.29e-5).abs() < 1e-7);
    }

    #[test]
    fn names_round_trip() {
        for name in [
            "owr", "eps-klnt", "eps-kt", "ucb", "ts", "uniform", "fixed:20", "jsq", "jfsq",
        ] {
            assert_eq!(name.parse::<PolicyKind>().unwrap().to_string(), name);
        }
        assert!("fixed:x".parse::<PolicyKind>().is_err());
        assert!("sed".parse::<PolicyKind>().is_err());
        assert_eq!(
            "obs=full".parse::<Observation>().unwrap(),
            Observation::Full
        );
        assert_eq!(
            "own".parse::<Observation>().unwrap(),
            Observation::OwnJobsOnly
        );
        assert_eq!(
            "obs=delayed:0.5".parse::<Observation>().unwrap(),
            Observation::Delayed(0.5)
        );
        assert!("delayed:0".parse::<Observation>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PolicySpec::new(PolicyKind::JoinShortestQueue, Observation::None).is_err());
        assert!(PolicySpec::new(PolicyKind::EpsLogT, Observation::Full).is_err());
        assert!(PolicySpec::new(PolicyKind::JoinShortestQueue, Observation::Full).is_ok());
        assert!(PolicySpec::blind(PolicyKind::ExploreThenExploit(0)).is_ok());
    }

    #[test]
    fn ucb_examples() {
        let est = RateEstimator::new(1);
        assert_eq!(ucb_rates(&est), vec![RATE_CEILING]);
        let mut est = RateEstimator::new(1);
        // 100 departures with mean service 10/3 slots: mu_hat = 0.3.
        for i in 0..100 {
            est.record_departure(0, if i % 3 == 0 { 4 } else { 3 });
        }
        let total = est.total_service(0);
        let mu_hat = 100.0 / total as f64;
        assert!((ucb_rates(&est)[0] - (mu_hat + 0.1)).abs() < 1e-15);
        let mut est = RateEstimator::new(1);
        for _ in 0..10 {
            est.record_departure(0, 3);
        }
        for _ in 0..10 {
            est.record_departure(0, 1);
        }
        // mu_hat = 20 / 40 = 0.5, N = 20.
        assert!((ucb_rates(&est)[0] - (0.5 + 1.0 / 20f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn thompson_empty_is_uniform() {
        let est = RateEstimator::new(1);
        let mut r = rng(1);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| ts_rates(&est, &mut r)[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    #[test]
    fn thompson_mean_matches_beta_mean() {
        let mut est = RateEstimator::new(1);
        for x in [1, 3, 1, 3, 1, 3, 1, 3, 2, 2] {
            est.record_departure(0, x);
        }
        // mu_hat = 10/20 = 0.5, N = 10: mean (5 + 1) / 12 = 0.5.
        let mut r = rng(2);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| ts_rates(&est, &mut r)[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.003, "{mean}");
    }

    #[test]
    fn eps_at_slot_two_always_explores() {
        let est = RateEstimator::new(6);
        let ctx = DispatchContext {
            t: 2,
            lambda: 0.2,
            true_mu: None,
            estimator: &est,
            observed: None,
        };
        let mut d = Dispatcher::new(PolicySpec::blind(PolicyKind::EpsLogT).unwrap());
        let mut r = rng(3);
        let mut counts = [0u32; 6];
        for _ in 0..60_000 {
            let coin = r.uniform();
            assert_eq!(d.plan(&ctx, coin, &mut r), Plan::Explore);
            counts[r.index(6)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0);
        }
    }

    #[test]
    fn jsq_picks_unique_argmin() {
        assert_eq!(
            shortest_queue_distribution(&[5, 0, 2], None),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            shortest_queue_distribution(&[1, 0, 0], None),
            vec![0.0, 0.5, 0.5]
        );
        assert_eq!(
            shortest_queue_distribution(&[1, 0, 0], Some(&[0.9, 0.2, 0.4])),
            vec![0.0, 0.0, 1.0]
        );
        let est = RateEstimator::new(3);
        let q = [5, 0, 2];
        let ctx = DispatchContext {
            t: 10,
            lambda: 0.2,
            true_mu: None,
            estimator: &est,
            observed: Some(&q),
        };
        let spec = PolicySpec::new(PolicyKind::JoinShortestQueue, Observation::Full).unwrap();
        for s in 0..100 {
            assert_eq!(decide(&spec, &ctx, &mut rng(s)), 1);
        }
    }

    #[test]
    fn infeasible_estimates_fall_back() {
        let mut est = RateEstimator::new(2);
        est.record_departure(0, 100);
        est.record_departure(1, 100);
        let ctx = DispatchContext {
            t: 1000,
            lambda: 0.2,
            true_mu: None,
            estimator: &est,
            observed: None,
        };
        let mut d = Dispatcher::new(PolicySpec::blind(PolicyKind::EpsOneOverT).unwrap());
        assert_eq!(d.plan(&ctx, 0.99, &mut rng(4)), Plan::Fallback);
        assert_eq!(d.fallbacks(), 1);
    }

    #[test]
    fn uniform_warm_start_explores_until_sampled() {
        let mut est = RateEstimator::new(2);
        est.record_departure(0, 2);
        let ctx = DispatchContext {
            t: 1_000_000,
            lambda: 0.2,
            true_mu: None,
            estimator: &est,
            observed: None,
        };
        let spec = PolicySpec::blind(PolicyKind::EpsLogT)
            .unwrap()
            .with_warm_start(WarmStart::UniformUntilSampled);
        assert_eq!(Dispatcher::new(spec.clone()).exploration_prob(&ctx), 1.0);
        est.record_departure(1, 2);
        let ctx = DispatchContext {
            t: 1_000_000,
            lambda: 0.2,
            true_mu: None,
            estimator: &est,
            observed: None,
        };
        assert!(Dispatcher::new(spec).exploration_prob(&ctx) < 1e-4);
    }
}
