//! Accountant closed forms, calibration and accountant properties.

use adp2sgd_core::privacy::{
    add_noise, calibrate_sigma, compose, evaluate_calibration, find_mu, gaussian_rdp, per_iteration_epsilon,
    rdp_to_dp, subsampled_gaussian_rdp, BudgetRequest, MuSearch, RdpPoint, SpendLedger, ALPHA_BOUND,
    DEFAULT_MU_GRID, REL_TOL,
};
use adp2sgd_core::{rng, Error, ModelVector};
use proptest::prelude::*;
use twofloat::TwoFloat;

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

fn tf(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

fn feasible_request() -> BudgetRequest {
    BudgetRequest { eps: 5.0, delta: 0.01, workers: 16, n1: 3125, batch: 256, iterations: 20_000, clip_bound: 1.0 }
}

fn infeasible_request() -> BudgetRequest {
    BudgetRequest { eps: 2.0, delta: 1e-5, iterations: 1000, ..feasible_request() }
}

#[test]
fn gaussian_closed_forms() {
    assert!(rel(gaussian_rdp(2.0, 1.0, 1.0).unwrap().eps_rdp, 1.0) <= REL_TOL);
    assert!(rel(gaussian_rdp(3.0, 2.0, 4.0).unwrap().eps_rdp, 1.5) <= REL_TOL);
    assert!(gaussian_rdp(2.0, 1.0, 1e300).unwrap().eps_rdp < 1e-299);
    assert!(matches!(gaussian_rdp(2.0, 1.0, 0.0), Err(Error::Domain(_))));
    assert!(matches!(gaussian_rdp(1.0, 1.0, 1.0), Err(Error::Domain(_))));
}

#[test]
fn subsampled_closed_forms_and_regimes() {
    let p = subsampled_gaussian_rdp(2.0, 0.01, 1.0, 10.0).unwrap();
    assert!(rel(p.eps_rdp, 1e-4) <= REL_TOL);
    match subsampled_gaussian_rdp(3.0, 0.01, 1.0, 10.0) {
        Err(Error::OutOfRegime { lhs, rhs, .. }) => {
            assert_eq!(lhs, 3.0);
            assert!(rel(rhs, (1.0f64 / 0.11).ln()) <= REL_TOL);
        }
        other => panic!("{other:?}"),
    }
    match subsampled_gaussian_rdp(2.0, 0.01, 1.0, 1.0) {
        Err(Error::OutOfRegime { lhs, rhs, .. }) => assert_eq!((lhs, rhs), (1.0, 1.5)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn composition_and_conversion() {
    let pts: Vec<RdpPoint> = [0.1, 0.2, 0.3].iter().map(|&e| RdpPoint { alpha: 2.0, eps_rdp: e }).collect();
    assert!(rel(compose(&pts).unwrap().eps_rdp, 0.6) <= REL_TOL);
    assert_eq!(compose(&[]).unwrap().eps_rdp, 0.0);
    let mixed = [RdpPoint { alpha: 2.0, eps_rdp: 0.1 }, RdpPoint { alpha: 3.0, eps_rdp: 0.1 }];
    assert!(matches!(compose(&mixed), Err(Error::Composition(_))));
    let x = RdpPoint { alpha: 2.0, eps_rdp: 0.013 };
    assert!(rel(compose(&vec![x; 7919]).unwrap().eps_rdp, 7919.0 * 0.013) <= REL_TOL);

    let oracle = (tf(1.0) + (tf(1.0) / tf(1e-5)).ln()).hi();
    assert!(rel(rdp_to_dp(RdpPoint { alpha: 2.0, eps_rdp: 1.0 }, 1e-5).unwrap(), oracle) <= REL_TOL);
    assert_eq!(rdp_to_dp(RdpPoint { alpha: 2.0, eps_rdp: 0.0 }, 1.0).unwrap(), 0.0);
    assert!(rel(rdp_to_dp(RdpPoint { alpha: f64::INFINITY, eps_rdp: 0.7 }, 0.3).unwrap(), 0.7) <= REL_TOL);
    assert!(rdp_to_dp(RdpPoint { alpha: 1.0, eps_rdp: 0.7 }, 0.3).is_err());
}

#[test]
fn feasible_calibration_matches_extended_precision() {
    let p = calibrate_sigma(&feasible_request(), 0.5).unwrap();
    let alpha = (tf(1.0) / tf(0.01)).ln() / tf(2.5) + tf(1.0);
    let sigma2 = tf(20.0) * tf(20_000.0) * alpha / (tf(256.0) * tf(3125.0) * tf(3125.0) * tf(0.5) * tf(5.0));
    assert!(rel(p.alpha, alpha.hi()) < 1e-14);
    assert!(rel(p.sigma2, sigma2.hi()) < 1e-14);
    assert!((p.alpha - 2.842068).abs() < 1e-6);
    assert!((p.sigma2 - 1.8189e-4).abs() < 1e-8);

    let gamma = tf(256.0) / tf(50_000.0);
    let ratio = sigma2 * tf(256.0) * tf(256.0) / tf(4.0);
    let alpha_rhs = (tf(16.0 * 3125.0).powi(3) * tf(2.5)
        / (tf(16.0 * 3125.0).powi(2) * tf(2.5) * tf(256.0) + tf(5.0) * tf(20_000.0) * alpha * tf(256.0).powi(3)))
    .ln();
    let eps_rhs = tf(10.0) * tf(256.0 * 256.0) * tf(20_000.0) * alpha / (tf(3.0) * tf(16.0 * 3125.0).powi(2) * tf(0.5));
    assert!(rel(p.checks[0].lhs, ratio.hi()) < 1e-13);
    assert!(rel(p.checks[1].rhs, alpha_rhs.hi()) < 1e-13);
    assert!(rel(p.checks[2].rhs, eps_rhs.hi()) < 1e-13);
    assert!(p.checks.iter().all(|c| c.holds));
    assert!((ratio.hi() - 2.98).abs() < 0.01);
    assert!((alpha_rhs.hi() - 3.893).abs() < 1e-3);
    // The accountant's own regime check at the calibrated point.
    let regime = (tf(1.0) / (gamma * (tf(1.0) + ratio))).ln();
    assert!(alpha.hi() <= regime.hi());

    let eps_prime = p.accounted_epsilon().unwrap();
    assert!(eps_prime <= 5.0 * (1.0 + REL_TOL), "{eps_prime}");
    assert!(p.meets_noise_floor_direct());
}

#[test]
fn infeasible_calibration_names_alpha_constraint() {
    match calibrate_sigma(&infeasible_request(), 0.5) {
        Err(Error::InfeasibleBudget { constraint, lhs, rhs }) => {
            assert_eq!(constraint, ALPHA_BOUND);
            assert!((lhs - 12.513).abs() < 1e-3);
            assert!((rhs - 4.30).abs() < 0.01);
        }
        other => panic!("{other:?}"),
    }
    let zero_t = BudgetRequest { iterations: 0, ..feasible_request() };
    assert!(matches!(calibrate_sigma(&zero_t, 0.5), Err(Error::Domain(_))));
}

#[test]
fn mu_search() {
    match find_mu(&feasible_request(), DEFAULT_MU_GRID).unwrap() {
        MuSearch::Feasible(p) => {
            assert!(p.is_feasible());
            let recheck = calibrate_sigma(&feasible_request(), p.mu).unwrap();
            assert_eq!(recheck, p);
        }
        other => panic!("{other:?}"),
    }
    match find_mu(&infeasible_request(), DEFAULT_MU_GRID).unwrap() {
        MuSearch::Infeasible { closest, failed } => {
            assert!(!failed.is_empty());
            assert!(!closest.is_feasible());
        }
        other => panic!("{other:?}"),
    }
    for i in 1..=DEFAULT_MU_GRID {
        let mu = i as f64 / (DEFAULT_MU_GRID + 1) as f64;
        assert!(!evaluate_calibration(&infeasible_request(), mu).unwrap().is_feasible());
    }
    assert!(find_mu(&feasible_request(), 1).is_err());
}

#[test]
fn per_iteration_budget_values() {
    let p = calibrate_sigma(&feasible_request(), 0.5).unwrap();
    assert_eq!(per_iteration_epsilon(20_000, &p).unwrap(), 5.0);
    assert_eq!(per_iteration_epsilon(0, &p).unwrap(), 0.0);
    assert!(rel(per_iteration_epsilon(5000, &p).unwrap(), 2.5) <= REL_TOL);
    assert!(per_iteration_epsilon(20_001, &p).is_err());
}

#[test]
fn noise_moments() {
    let d = 10_000;
    let draws = 100;
    let mut r = rng::stream(4, "noise", 0);
    let zero = ModelVector::zeros(d);
    let mut sums = vec![0.0; d];
    let mut sq = 0.0;
    for _ in 0..draws {
        let n = add_noise(&zero, 1.0, &mut r).unwrap();
        for (s, x) in sums.iter_mut().zip(n.as_slice()) {
            *s += x;
        }
        sq += n.norm_sq();
    }
    let total = (d * draws) as f64;
    let grand_mean = sums.iter().sum::<f64>() / total;
    assert!(grand_mean.abs() < 4.0 / total.sqrt());
    let var = sq / total - grand_mean * grand_mean;
    assert!((var - 1.0).abs() < 0.02);
    assert!(add_noise(&zero, -1.0, &mut r).is_err());
}

proptest! {
    #[test]
    fn gaussian_rdp_is_monotone(
        alpha in 1.01f64..100.0,
        delta2 in 1e-3f64..10.0,
        sigma2 in 1e-3f64..100.0,
        bump in 1.001f64..2.0,
    ) {
        let base = gaussian_rdp(alpha, delta2, sigma2).unwrap().eps_rdp;
        prop_assert!(gaussian_rdp(alpha * bump, delta2, sigma2).unwrap().eps_rdp > base);
        prop_assert!(gaussian_rdp(alpha, delta2 * bump, sigma2).unwrap().eps_rdp > base);
        prop_assert!(gaussian_rdp(alpha, delta2, sigma2 * bump).unwrap().eps_rdp < base);
    }

    #[test]
    fn calibrated_bundles_satisfy_the_accountant(
        eps in 0.5f64..10.0,
        log_delta in -8.0f64..-2.0,
        mu in 0.05f64..0.95,
        workers in 2usize..32,
        n1 in 1000usize..10_000,
        batch in 16usize..512,
        iterations in 100usize..50_000,
        clip_bound in 0.1f64..10.0,
    ) {
        let req = BudgetRequest { eps, delta: 10f64.powf(log_delta), workers, n1, batch, iterations, clip_bound };
        let p = evaluate_calibration(&req, mu).unwrap();
        // Both statements of the noise floor agree.
        prop_assert_eq!(p.checks[0].holds, p.meets_noise_floor_direct());
        if p.is_feasible() {
            let eps_prime = p.accounted_epsilon().unwrap();
            prop_assert!(eps_prime <= eps * (1.0 + REL_TOL), "{} > {}", eps_prime, eps);
        }
    }

    #[test]
    fn ledger_is_linear(cost in 1e-9f64..1.0, steps in 1usize..5000) {
        let mut ledger = SpendLedger::new();
        for t in 1..=steps {
            ledger.record(t, cost);
        }
        prop_assert!(rel(ledger.total(), steps as f64 * cost) <= 1e-12);
        prop_assert_eq!(ledger.len(), steps);
    }

    #[test]
    fn per_iteration_budget_is_monotone_and_concave(t in 1usize..19_999) {
        let p = calibrate_sigma(&feasible_request(), 0.5).unwrap();
        let e = |t| per_iteration_epsilon(t, &p).unwrap();
        prop_assert!(e(t) >= e(t - 1));
        prop_assert!(e(t + 1) - e(t) <= e(t) - e(t - 1) + 1e-15);
    }
}
