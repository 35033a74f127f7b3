//! Optimal weighted random routing.
//!
//! Routing an arrival to server `i` with fixed probability `p_i` turns the
//! system into `K` independent Geo/Geo/1 queues. Minimizing the total mean
//! queue length over the simplex has a water-filling solution: on the optimal
//! support `S`,
//!
//! ```text
//! p_i = mu_i / lambda - s_i / sum_{j in S} s_j * (sum_{j in S} mu_j / lambda - 1),
//! s_i = sqrt(mu_i (1 - mu_i)),
//! ```
//!
//! and `p_i = 0` off the support. The support is always a prefix of the
//! servers sorted by decreasing service rate, found by repeatedly dropping
//! the slowest server while the closed form yields a nonpositive entry.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::geometric_concentration_constant;
use crate::model::{total_mean_queue_for, SystemParams};
use crate::rng::{Purpose, RandomStream, StreamId};

/// Entries of a candidate at or below this value count as zero.
pub const ZERO_TOLERANCE: f64 = 1e-12;

/// Corner enumeration of the tolerance gap is limited to this many servers.
pub const MAX_CORNER_SERVERS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingVector {
    p: Vec<f64>,
    support: Vec<usize>,
}

impl RoutingVector {
    /// Builds a routing vector from probabilities, deriving the support as
    /// the indices with strictly positive mass.
    pub fn from_probabilities(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidParams("empty routing vector".into()));
        }
        if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::InvalidParams(format!(
                "routing entry {x} is negative"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "routing vector sums to {sum}"
            )));
        }
        let support = p
            .iter()
            .enumerate()
            .filter(|(_, &x)| x > 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(Self { p, support })
    }

    /// Point mass on `server`.
    pub fn single(servers: usize, server: usize) -> Self {
        let mut p = vec![0.0; servers];
        p[server] = 1.0;
        Self {
            p,
            support: vec![server],
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    /// Support indices in increasing order.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Server indices sorted by decreasing service rate; ties keep index order.
pub fn rate_order(mu: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mu.len()).collect();
    order.sort_by(|&a, &b| mu[b].total_cmp(&mu[a]));
    order
}

/// Closed-form candidate for a given support. Entries may be negative; the
/// caller decides feasibility.
pub fn routing_for_support(params: &SystemParams, support: &[usize]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::InvalidParams("support set is empty".into()));
    }
    let lambda = params.lambda();
    let mu = params.mu();
    let total: f64 = support.iter().map(|&i| mu[i]).sum();
    if total <= lambda {
        return Err(Error::InsufficientCapacity { total, lambda });
    }
    let spread = |m: f64| (m * (1.0 - m)).sqrt();
    let sum_spread: f64 = support.iter().map(|&i| spread(mu[i])).sum();
    let level = (total / lambda - 1.0) / sum_spread;
    let mut p = vec![0.0; mu.len()];
    for &i in support {
        p[i] = mu[i] / lambda - spread(mu[i]) * level;
    }
    Ok(p)
}

/// Outcome of the support search, with the boundary flag used in
/// diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportSearch {
    pub routing: RoutingVector,
    /// True if some server was dropped because its candidate entry was zero
    /// to within [`ZERO_TOLERANCE`]. Such instances have a zero tolerance gap.
    pub boundary: bool,
}

/// Iterative support search: start from all servers, drop the slowest while
/// any candidate entry in the support is nonpositive.
pub fn search_support(params: &SystemParams) -> SupportSearch {
    let order = rate_order(params.mu());
    let mut size = order.len();
    let mut boundary = false;
    loop {
        let support = &order[..size];
        let candidate = routing_for_support(params, support)
            .expect("support prefix lost capacity; shrinking must keep total rate above lambda");
        let worst = support
            .iter()
            .map(|&i| candidate[i])
            .fold(f64::INFINITY, f64::min);
        if worst > ZERO_TOLERANCE {
            let mut support = support.to_vec();
            support.sort_unstable();
            return SupportSearch {
                routing: RoutingVector {
                    p: candidate,
                    support,
                },
                boundary,
            };
        }
        if worst.abs() <= ZERO_TOLERANCE {
            boundary = true;
        }
        assert!(
            size > 1,
            "a single fastest server always carries positive mass"
        );
        size -= 1;
    }
}

/// The optimal weighted random routing vector for known rates.
pub fn optimal_routing(params: &SystemParams) -> RoutingVector {
    search_support(params).routing
}

/// Reference solver: evaluates the closed form on every sorted prefix, keeps
/// the feasible candidates and returns the one with the smallest total mean
/// queue length.
pub fn oracle_optimal_routing(params: &SystemParams) -> RoutingVector {
    let order = rate_order(params.mu());
    let mut best: Option<(f64, Vec<f64>)> = None;
    for size in 1..=order.len() {
        let support = &order[..size];
        let Ok(candidate) = routing_for_support(params, support) else {
            continue;
        };
        if support.iter().any(|&i| candidate[i] < 0.0) {
            continue;
        }
        let clipped: Vec<f64> = candidate.iter().map(|x| x.max(0.0)).collect();
        let Ok(objective) = total_mean_queue_for(params, &clipped) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| objective < *b) {
            best = Some((objective, clipped));
        }
    }
    let (_, p) = best.expect("the fastest server alone or a larger prefix is always feasible");
    let support = p
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(i, _)| i)
        .collect();
    RoutingVector { p, support }
}

/// Slack `mu_i - lambda p_i` of every server.
pub fn residual_capacities(params: &SystemParams, p: &RoutingVector) -> Result<Vec<f64>> {
    params
        .mu()
        .iter()
        .zip(p.probabilities())
        .map(|(&mu, &pi)| {
            let arrival = params.lambda() * pi;
            let r = mu - arrival;
            if r > 0.0 {
                Ok(r)
            } else {
                Err(Error::Unstable {
                    arrival,
                    service: mu,
                })
            }
        })
        .collect()
}

/// Support set of the optimal routing for perturbed rates, or `None` when
/// the perturbed rates are not a valid system.
pub fn support_for_rates(lambda: f64, mu: &[f64]) -> Option<Vec<usize>> {
    let params = SystemParams::new(lambda, mu.to_vec()).ok()?;
    Some(search_support(&params).routing.support)
}

/// Bracket on the tolerance gap: the largest uniform perturbation radius of
/// the service rates that keeps the optimal support unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapInterval {
    /// Largest radius at which every tested perturbation kept the support.
    pub lo: f64,
    /// Smallest radius at which a perturbation changed the support (or left
    /// the valid parameter region).
    pub hi: f64,
    /// Corners were skipped because the instance has too many servers; `lo`
    /// then rests on random perturbations only.
    pub sampling_only: bool,
}

/// Bisection estimate of the tolerance gap.
///
/// A radius fails as soon as one perturbation changes the support, which
/// certifies `gap < radius`. A radius passes when every corner `mu_i +/- d`
/// and `samples` uniform draws from the box keep the support; that is only
/// evidence, so the result is an interval.
pub fn tolerance_gap_estimate(
    params: &SystemParams,
    resolution: f64,
    samples: usize,
) -> Result<GapInterval> {
    if resolution.is_nan() || resolution <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "resolution {resolution} must be positive"
        )));
    }
    let lambda = params.lambda();
    let mu = params.mu();
    let k = mu.len();
    let reference = search_support(params).routing.support;
    let sampling_only = k > MAX_CORNER_SERVERS;

    // At this radius some corner sits on the boundary of the valid region.
    let mut hi = mu
        .iter()
        .map(|&m| m.min(1.0 - m))
        .fold((params.total_service() - lambda) / k as f64, f64::min);
    let mut lo = 0.0;

    let mut rng = RandomStream::new(0x746f_6c67_6170, StreamId::global(Purpose::Check));
    let mut perturbed = vec![0.0; k];
    let mut keeps_support = |radius: f64| -> bool {
        if !sampling_only {
            for mask in 0u32..(1u32 << k) {
                for (i, slot) in perturbed.iter_mut().enumerate() {
                    let sign = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                    *slot = mu[i] + sign * radius;
                }
                if support_for_rates(lambda, &perturbed).as_ref() != Some(&reference) {
                    return false;
                }
            }
        }
        for _ in 0..samples {
            for (slot, &m) in perturbed.iter_mut().zip(mu) {
                *slot = m + radius * (2.0 * rng.uniform() - 1.0);
            }
            if support_for_rates(lambda, &perturbed).as_ref() != Some(&reference) {
                return false;
            }
        }
        true
    };

    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if keeps_support(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(GapInterval {
        lo,
        hi,
        sampling_only,
    })
}

/// Constants of the rate-to-routing sensitivity bound: if every estimated
/// rate is within `delta < delta_cap` of the truth then each routing entry
/// moves by at most `min(c delta, r_i / (4 lambda))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityConstants {
    /// Residual capacities `mu_i - lambda p*_i` under the optimal routing.
    pub r: Vec<f64>,
    pub delta_cap: f64,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    /// Geometric concentration exponent, minimized over servers.
    pub c_g: f64,
    /// `min over the support of min(mu_j, 1 - mu_j)`.
    pub mu_tilde: f64,
    pub support_size: usize,
    /// Lower end of the tolerance-gap bracket that entered `delta_cap`.
    pub gap_lower: f64,
    /// The tolerance gap could not be shown positive, so `delta_cap` is 0.
    pub zero_gap: bool,
    lambda: f64,
}

impl SensitivityConstants {
    /// Per-server bound on `|p_hat_i - p*_i|` at estimation radius `delta`.
    pub fn bound_p_error(&self, delta: f64, server: usize) -> f64 {
        (self.c * delta).min(self.r[server] / (4.0 * self.lambda))
    }
}

pub fn sensitivity_constants(params: &SystemParams, gap: &GapInterval) -> SensitivityConstants {
    let lambda = params.lambda();
    let mu = params.mu();
    let routing = optimal_routing(params);
    let r = residual_capacities(params, &routing)
        .expect("optimal routing keeps every queue strictly stable");
    let support = routing.support();
    let size = support.len() as f64;
    let sum_r: f64 = support.iter().map(|&j| r[j]).sum();
    let min_r = support.iter().map(|&j| r[j]).fold(f64::INFINITY, f64::min);
    let mu_tilde = support
        .iter()
        .map(|&j| mu[j].min(1.0 - mu[j]))
        .fold(f64::INFINITY, f64::min);

    let c1 = (1.0 + 4.0 * sum_r / mu_tilde + size) / lambda;
    let c2 = 1.0 / lambda + 30.0 * sum_r / (lambda * mu_tilde) + 16.0 * size / lambda;
    let c = c1.max(c2);

    let gap_lower = gap.lo.max(0.0);
    let delta_cap = (mu_tilde / 2.0)
        .min(sum_r / size)
        .min(min_r / (4.0 * c * lambda))
        .min(gap_lower);

    let c_g = mu
        .iter()
        .map(|&m| geometric_concentration_constant(m))
        .fold(f64::INFINITY, f64::min);

    SensitivityConstants {
        r,
        delta_cap,
        c,
        c1,
        c2,
        c_g,
        mu_tilde,
        support_size: support.len(),
        gap_lower,
        zero_gap: gap_lower <= 0.0,
        lambda,
    }
}
