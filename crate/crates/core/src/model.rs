//! System parameters, queue dynamics and the Geo/Geo/1 mean queue length.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::routing::RoutingVector;

/// Arrival rate and per-server service rates, all per-slot probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemParams {
    lambda: f64,
    mu: Vec<f64>,
}

impl SystemParams {
    pub fn new(lambda: f64, mu: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidParams(
                "at least one server is required".into(),
            ));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidParams(format!(
                "arrival rate {lambda} must lie in (0, 1)"
            )));
        }
        if let Some((i, m)) = mu.iter().enumerate().find(|(_, &m)| !(m > 0.0 && m < 1.0)) {
            return Err(Error::InvalidParams(format!(
                "service rate {m} of server {i} must lie in (0, 1)"
            )));
        }
        let total: f64 = mu.iter().sum();
        if lambda >= total {
            return Err(Error::InsufficientCapacity { total, lambda });
        }
        Ok(Self { lambda, mu })
    }

    /// The six-server family used in the experiments: `mu_i = 2^(i-1) mu_1`
    /// scaled so the rates sum to `total`.
    pub fn geometric_rates(lambda: f64, servers: usize, total: f64) -> Result<Self> {
        let base = total / ((1u64 << servers) - 1) as f64;
        let mu = (0..servers).map(|i| base * (1u64 << i) as f64).collect();
        Self::new(lambda, mu)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn servers(&self) -> usize {
        self.mu.len()
    }

    pub fn total_service(&self) -> f64 {
        self.mu.iter().sum()
    }

    /// Same service rates under a different arrival rate.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(lambda, self.mu.clone())
    }
}

/// Expected steady-state queue length of a Geo/Geo/1 queue (jobs in service
/// included) with per-slot arrival probability `lambda_eff` and service
/// probability `mu`.
pub fn geo_mean_queue(lambda_eff: f64, mu: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&mu) || mu <= 0.0 {
        return Err(Error::OutOfRange {
            value: mu,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if lambda_eff < 0.0 {
        return Err(Error::OutOfRange {
            value: lambda_eff,
            lo: 0.0,
            hi: mu,
        });
    }
    if lambda_eff >= mu {
        return Err(Error::Unstable {
            arrival: lambda_eff,
            service: mu,
        });
    }
    Ok(lambda_eff * (1.0 - mu) / (mu - lambda_eff))
}

/// Total expected steady-state queue length when every arrival is routed to
/// server `i` with probability `p[i]`.
pub fn total_mean_queue(params: &SystemParams, p: &RoutingVector) -> Result<f64> {
    total_mean_queue_for(params, p.probabilities())
}

/// [`total_mean_queue`] over a raw probability slice.
pub fn total_mean_queue_for(params: &SystemParams, p: &[f64]) -> Result<f64> {
    if p.len() != params.servers() {
        return Err(Error::InvalidParams(format!(
            "routing vector has {} entries for {} servers",
            p.len(),
            params.servers()
        )));
    }
    params
        .mu()
        .iter()
        .zip(p)
        .map(|(&mu, &pi)| geo_mean_queue(params.lambda() * pi, mu))
        .sum()
}

/// Per-server queue lengths after slot `t`. `t = 0` is the empty initial
/// condition; the first simulated slot is `t = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueState {
    q: Vec<u64>,
    t: u64,
}

impl QueueState {
    pub fn empty(servers: usize) -> Self {
        Self {
            q: vec![0; servers],
            t: 0,
        }
    }

    pub fn from_lengths(q: Vec<u64>, t: u64) -> Self {
        Self { q, t }
    }

    pub fn lengths(&self) -> &[u64] {
        &self.q
    }

    pub fn slot(&self) -> u64 {
        self.t
    }

    pub fn total(&self) -> u64 {
        self.q.iter().sum()
    }

    /// Advance one slot. Arrivals join before the departure decision, so a
    /// job arriving to an empty queue may leave in the same slot. Departures
    /// are written into `departed` and their total is returned.
    ///
    /// The dispatcher sends at most one job per slot; `arrivals` is a count
    /// vector so that cross-traffic can add a second job to the same server.
    pub fn step_into(&mut self, arrivals: &[u32], offered: &[bool], departed: &mut [bool]) -> u64 {
        debug_assert_eq!(arrivals.len(), self.q.len());
        debug_assert_eq!(offered.len(), self.q.len());
        let mut total = 0;
        for i in 0..self.q.len() {
            let present = self.q[i] + u64::from(arrivals[i]);
            let d = offered[i] && present > 0;
            departed[i] = d;
            self.q[i] = present - u64::from(d);
            total += u64::from(d);
        }
        self.t += 1;
        total
    }

    /// Value-returning form of [`QueueState::step_into`].
    pub fn step(&self, arrivals: &[u32], offered: &[bool]) -> QueueState {
        let mut next = self.clone();
        let mut departed = vec![false; self.q.len()];
        next.step_into(arrivals, offered, &mut departed);
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn geo_mean_queue_examples() {
        assert!(close(geo_mean_queue(0.2, 0.55).unwrap(), 9.0 / 35.0, 1e-15));
        assert_eq!(geo_mean_queue(0.0, 0.5).unwrap(), 0.0);
        assert!(close(geo_mean_queue(0.05, 0.5).unwrap(), 1.0 / 18.0, 1e-15));
    }

    #[test]
    fn geo_mean_queue_rejects_unstable() {
        assert!(matches!(
            geo_mean_queue(0.5, 0.5),
            Err(Error::Unstable { .. })
        ));
        assert!(matches!(
            geo_mean_queue(0.6, 0.5),
            Err(Error::Unstable { .. })
        ));
        assert!(geo_mean_queue(-0.1, 0.5).is_err());
        assert!(geo_mean_queue(0.1, 1.0).is_err());
    }

    #[test]
    fn geo_mean_queue_monotone_by_finite_differences() {
        let h = 1e-6;
        for i in 1..40 {
            let mu = i as f64 / 40.0;
            for j in 0..20 {
                let lam = mu * j as f64 / 21.0;
                let base = geo_mean_queue(lam, mu).unwrap();
                assert!(geo_mean_queue(lam + h, mu).unwrap() > base);
                if mu + h < 1.0 {
                    assert!(geo_mean_queue(lam, mu + h).unwrap() < base || lam == 0.0);
                }
            }
        }
    }

    #[test]
    fn total_mean_queue_two_server_example() {
        let params = SystemParams::new(0.2, vec![0.45, 0.55]).unwrap();
        let v = total_mean_queue_for(&params, &[0.25, 0.75]).unwrap();
        assert!(close(v, 19.0 / 80.0, 1e-15), "{v}");
        let one = total_mean_queue_for(&params, &[0.0, 1.0]).unwrap();
        assert!(close(one, geo_mean_queue(0.2, 0.55).unwrap(), 0.0));
    }

    #[test]
    fn params_validation() {
        assert!(SystemParams::new(0.2, vec![]).is_err());
        assert!(SystemParams::new(0.0, vec![0.5]).is_err());
        assert!(SystemParams::new(0.2, vec![1.0]).is_err());
        assert!(matches!(
            SystemParams::new(0.6, vec![0.3, 0.2]),
            Err(Error::InsufficientCapacity { .. })
        ));
        let g = SystemParams::geometric_rates(0.5, 6, 0.99).unwrap();
        assert!(close(g.total_service(), 0.99, 1e-15));
        assert!(close(g.mu()[5], 32.0 * g.mu()[0], 1e-15));
    }

    #[test]
    fn step_examples() {
        let s = QueueState::from_lengths(vec![0, 3], 0);
        assert_eq!(s.step(&[1, 0], &[true, true]).lengths(), &[0, 2]);
        let s = QueueState::empty(2);
        let n = s.step(&[0, 0], &[true, true]);
        assert_eq!(n.lengths(), &[0, 0]);
        assert_eq!(n.slot(), 1);
        let s = QueueState::from_lengths(vec![2, 0], 0);
        assert_eq!(s.step(&[0, 1], &[false, true]).lengths(), &[2, 0]);
    }
}
