//! Service-rate estimation from observed service times.

use serde::Serialize;

use crate::error::{Error, Result};

/// Estimate reported for a server with no completed jobs.
pub const WARM_START_ESTIMATE: f64 = 1.0;

/// Per-server departure counts and summed service times (in slots).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RateEstimator {
    n: Vec<u64>,
    total_service: Vec<u64>,
}

impl RateEstimator {
    pub fn new(servers: usize) -> Self {
        Self {
            n: vec![0; servers],
            total_service: vec![0; servers],
        }
    }

    pub fn servers(&self) -> usize {
        self.n.len()
    }

    /// Record one departure with a service time of `service_time` slots,
    /// counted from reaching the head of the queue.
    pub fn record_departure(&mut self, server: usize, service_time: u64) {
        debug_assert!(service_time >= 1);
        self.n[server] += 1;
        self.total_service[server] += service_time;
    }

    pub fn departures(&self, server: usize) -> u64 {
        self.n[server]
    }

    pub fn total_service(&self, server: usize) -> u64 {
        self.total_service[server]
    }

    pub fn counts(&self) -> &[u64] {
        &self.n
    }

    /// Every server has at least one completed job.
    pub fn all_sampled(&self) -> bool {
        self.n.iter().all(|&n| n > 0)
    }

    /// `N_i / sum of service times`, or [`WARM_START_ESTIMATE`] before the
    /// first departure.
    pub fn estimate(&self, server: usize) -> f64 {
        match self.n[server] {
            0 => WARM_START_ESTIMATE,
            n => n as f64 / self.total_service[server] as f64,
        }
    }

    pub fn estimates(&self) -> Vec<f64> {
        (0..self.servers()).map(|i| self.estimate(i)).collect()
    }
}

/// Exponent constant of the geometric concentration bound for one rate:
/// `min(1 / (8 mu^2 (1 - mu)), 1 / (6 mu^2 (1 - mu) (3 - mu)))`.
pub fn geometric_concentration_constant(mu: f64) -> f64 {
    let a = 1.0 / (8.0 * mu * mu * (1.0 - mu));
    let b = 1.0 / (6.0 * mu * mu * (1.0 - mu) * (3.0 - mu));
    a.min(b)
}

/// Upper bound on `P(|mu_hat - mu| >= delta)` when `mu_hat` is the
/// reciprocal sample mean of `n` i.i.d. Geometric(`mu`) service times.
/// Valid for `0 <= delta <= mu (1 - mu)`.
pub fn concentration_bound(n: u64, delta: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::OutOfRange {
            value: mu,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let hi = mu * (1.0 - mu);
    if !(0.0..=hi).contains(&delta) {
        return Err(Error::OutOfRange {
            value: delta,
            lo: 0.0,
            hi,
        });
    }
    Ok((-(n as f64) * geometric_concentration_constant(mu) * delta * delta).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, RandomStream, StreamId};

    #[test]
    fn recording() {
        let mut e = RateEstimator::new(3);
        e.record_departure(0, 4);
        assert_eq!(e.counts(), &[1, 0, 0]);
        assert_eq!(e.total_service(0), 4);
        let mut e = RateEstimator::new(1);
        for x in [2, 3, 5] {
            e.record_departure(0, x);
        }
        assert_eq!((e.departures(0), e.total_service(0)), (3, 10));
        assert!((e.estimate(0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn warm_start() {
        let e = RateEstimator::new(2);
        assert_eq!(e.estimate(1), 1.0);
        assert!(!e.all_sampled());
    }

    #[test]
    fn large_counts_fit() {
        let mut e = RateEstimator::new(1);
        for _ in 0..1_000_000 {
            e.record_departure(0, 1_000_000);
        }
        assert_eq!(e.total_service(0), 1_000_000_000_000);
        assert!((e.estimate(0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn batches_scale() {
        let mut one = RateEstimator::new(1);
        let mut many = RateEstimator::new(1);
        let batch = [1, 4, 2, 7];
        for &x in &batch {
            one.record_departure(0, x);
        }
        for _ in 0..5 {
            for &x in &batch {
                many.record_departure(0, x);
            }
        }
        assert_eq!(one.estimate(0), many.estimate(0));
    }

    #[test]
    fn consistent_on_geometric_samples() {
        let mut rng = RandomStream::new(3, StreamId::global(Purpose::Check));
        let mut e = RateEstimator::new(1);
        for _ in 0..100_000 {
            let mut x = 1;
            while !rng.bernoulli(0.5) {
                x += 1;
            }
            e.record_departure(0, x);
        }
        assert!((e.estimate(0) - 0.5).abs() < 0.01, "{}", e.estimate(0));
    }

    #[test]
    fn bound_values() {
        assert_eq!(concentration_bound(10, 0.0, 0.5).unwrap(), 1.0);
        assert!((geometric_concentration_constant(0.5) - 8.0 / 15.0).abs() < 1e-15);
        let b = concentration_bound(10, 0.2, 0.5).unwrap();
        assert!((b - (-10.0 * (8.0 / 15.0) * 0.04f64).exp()).abs() < 1e-15);
        assert!((b - 0.8079).abs() < 1e-4);
    }

    #[test]
    fn bound_rejects_invalid_delta() {
        assert!(concentration_bound(10, 0.26, 0.5).is_err());
        assert!(concentration_bound(10, -0.01, 0.5).is_err());
        assert!(concentration_bound(10, 0.1, 1.0).is_err());
    }
}
