//! The closed-form solver against an independent water-filling solution of
//! the same convex program.

use proptest::prelude::*;
use qdispatch::model::total_mean_queue_for;
use qdispatch::{optimal_routing, SystemParams};

/// Minimize `sum_i x_i (1 - mu_i) / (mu_i - x_i)` subject to `sum x = lambda`.
/// Stationarity gives `x_i = max(0, mu_i - s_i tau)` with
/// `s_i = sqrt(mu_i (1 - mu_i))`; bisect on the level `tau`.
fn water_filling(lambda: f64, mu: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).sqrt()).collect();
    let load = |tau: f64| -> f64 { mu.iter().zip(&s).map(|(m, s)| (m - s * tau).max(0.0)).sum() };
    let (mut lo, mut hi) = (
        0.0,
        mu.iter().zip(&s).map(|(m, s)| m / s).fold(0.0, f64::max),
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if load(mid) > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    mu.iter()
        .zip(&s)
        .map(|(m, s)| (m - s * tau).max(0.0) / lambda)
        .collect()
}

fn instance() -> impl Strategy<Value = SystemParams> {
    (prop::collection::vec(0.01f64..0.99, 1..=10), 0.01f64..0.99).prop_filter_map(
        "infeasible",
        |(mu, frac)| {
            let cap = mu.iter().sum::<f64>().min(1.0);
            SystemParams::new(cap * frac, mu).ok()
        },
    )
}

#[test]
fn two_server_reference_values() {
    let p = water_filling(0.2, &[0.45, 0.55]);
    assert!(
        (p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12,
        "{p:?}"
    );
    let p = water_filling(0.1, &[0.5, 0.01]);
    assert_eq!(p[1], 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn closed_form_matches_water_filling(params in instance()) {
        let got = optimal_routing(&params);
        let want = water_filling(params.lambda(), params.mu());
        for (a, b) in got.probabilities().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-9, "{:?} vs {:?}", got.probabilities(), want);
        }
    }

    #[test]
    fn no_pairwise_transfer_improves(params in instance(), eps in 1e-6f64..1e-3) {
        let p = optimal_routing(&params).probabilities().to_vec();
        let base = total_mean_queue_for(&params, &p).unwrap();
        for i in 0..p.len() {
            for j in 0..p.len() {
                if i == j || p[i] < eps {
                    continue;
                }
                let mut q = p.clone();
                q[i] -= eps;
                q[j] += eps;
                if let Ok(v) = total_mean_queue_for(&params, &q) {
                    prop_assert!(v >= base - 1e-12 * base.max(1.0), "moving {eps} from {i} to {j}: {v} < {base}");
                }
            }
        }
    }
}
