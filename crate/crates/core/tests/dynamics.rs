use qdispatch::policies::{DispatchContext, Dispatcher};
use qdispatch::sim::run_coupled_with;
use qdispatch::{
    optimal_routing, run_coupled, PolicyKind, PolicySpec, Purpose, RandomStream, RateEstimator,
    Scenario, StreamId, SystemParams,
};

fn blind(kind: PolicyKind) -> PolicySpec {
    PolicySpec::blind(kind).unwrap()
}

fn chi_square(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

#[test]
fn genie_dispatch_frequencies_follow_optimal_routing() {
    let params = SystemParams::geometric_rates(0.5, 6, 0.99).unwrap();
    let p = optimal_routing(&params).probabilities().to_vec();
    let scenario = Scenario::new(params, 400_000, blind(PolicyKind::GenieOwr)).unwrap();
    let run = run_coupled(&scenario, 11).unwrap();
    let d = &run.diagnostics;
    assert_eq!(d.genie_dispatch.iter().sum::<u64>(), d.arrivals);
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            assert_eq!(d.genie_dispatch[i], 0);
        }
    }
    let df = p.iter().filter(|&&x| x > 0.0).count() - 1;
    // Upper 1e-3 quantiles of chi-square with 1..=5 degrees of freedom.
    let critical = [10.828, 13.816, 16.266, 18.467, 20.515][df - 1];
    let stat = chi_square(&d.genie_dispatch, &p);
    assert!(stat < critical, "chi-square {stat} with {df} df");
}

#[test]
fn exact_estimates_give_optimal_exploit_routing() {
    let params = SystemParams::new(0.3, vec![0.5, 0.25]).unwrap();
    let mut est = RateEstimator::new(2);
    for _ in 0..10 {
        est.record_departure(0, 2);
        est.record_departure(1, 4);
    }
    let want = optimal_routing(&params);
    let mut rng = RandomStream::new(1, StreamId::global(Purpose::Policy));
    for kind in [
        PolicyKind::EpsLogT,
        PolicyKind::EpsOneOverT,
        PolicyKind::ExploreThenExploit(5),
    ] {
        let mut dispatcher = Dispatcher::new(blind(kind));
        let ctx = DispatchContext {
            t: 1_000,
            lambda: params.lambda(),
            true_mu: None,
            estimator: &est,
            observed: None,
        };
        let got = dispatcher.exploit_distribution(&ctx, &mut rng).unwrap();
        for (a, b) in got.iter().zip(want.probabilities()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn learners_never_need_the_true_rates() {
    // A blind learner only sees its estimator; a context without the true
    // rates must be enough for every learner kind.
    let mut est = RateEstimator::new(3);
    est.record_departure(0, 3);
    est.record_departure(2, 1);
    let mut rng = RandomStream::new(2, StreamId::global(Purpose::Policy));
    for kind in [
        PolicyKind::EpsLogT,
        PolicyKind::EpsOneOverT,
        PolicyKind::Ucb,
        PolicyKind::Thompson,
        PolicyKind::UniformRandom,
        PolicyKind::ExploreThenExploit(3),
    ] {
        assert!(!kind.uses_true_rates());
        let mut dispatcher = Dispatcher::new(blind(kind));
        let ctx = DispatchContext {
            t: 50,
            lambda: 0.4,
            true_mu: None,
            estimator: &est,
            observed: None,
        };
        let _ = dispatcher.plan(&ctx, 0.99, &mut rng);
    }
}

#[test]
fn learner_estimates_converge() {
    let params = SystemParams::new(0.5, vec![0.3, 0.6]).unwrap();
    let scenario = Scenario::new(params, 300_000, blind(PolicyKind::EpsLogT)).unwrap();
    let run = run_coupled(&scenario, 5).unwrap();
    let est = &run.diagnostics.final_estimates;
    assert!((est[0] - 0.3).abs() < 0.02, "{est:?}");
    assert!((est[1] - 0.6).abs() < 0.02, "{est:?}");
    let d = &run.diagnostics;
    assert_eq!(d.exploit_arrivals + d.explore_arrivals, d.arrivals);
}

#[test]
fn long_busy_periods_are_rare() {
    // Diagnostic for the busy-period tail: P(B_i(t) > 66 ln t / r_i^2) at
    // t = 10^4 on the two-server instance.
    let params = SystemParams::new(0.2, vec![0.45, 0.55]).unwrap();
    let r = [0.4f64, 0.4];
    let t = 10_000u64;
    let scenario = Scenario::new(params, t, blind(PolicyKind::EpsLogT)).unwrap();
    let reps = 200;
    let mut exceed = [0u32; 2];
    for seed in 0..reps {
        let run = run_coupled(&scenario, seed).unwrap();
        for i in 0..2 {
            let threshold = 66.0 * (t as f64).ln() / (r[i] * r[i]);
            exceed[i] += u32::from(run.diagnostics.final_learner_busy[i] as f64 > threshold);
        }
    }
    for e in exceed {
        assert!((e as f64 / reps as f64) < 0.05, "{exceed:?}");
    }
}

#[test]
fn regret_telescopes_over_recorded_paths() {
    let params = SystemParams::geometric_rates(0.4, 4, 0.99).unwrap();
    let scenario = Scenario::new(params, 20_000, blind(PolicyKind::Thompson)).unwrap();
    let run = run_coupled_with(&scenario, 9, true).unwrap();
    let paths = run.paths.unwrap();
    let mut acc = 0i64;
    let mut j = 0;
    for (s, (l, g)) in paths
        .learner_total
        .iter()
        .zip(&paths.genie_total)
        .enumerate()
    {
        acc += *l as i64 - *g as i64;
        if run.trace.checkpoints.get(j) == Some(&(s as u64 + 1)) {
            assert_eq!(run.trace.regret[j], acc);
            j += 1;
        }
    }
    assert_eq!(j, run.trace.checkpoints.len());
}
