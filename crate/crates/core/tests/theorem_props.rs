use proptest::prelude::*;
use selfcontrast_core::theorem::{
    lambda_of, min_negatives, multineg_validity, simulate_mse, upper_limit_pairs, var_multineg, var_multipair,
    GradientModel, PairLimit, SimConfig, TheoremError, Validity,
};

fn model() -> impl Strategy<Value = GradientModel> {
    (0.05f64..5.0, 0.05f64..5.0, -0.95f64..0.95).prop_map(|(s1, s2, rho)| GradientModel::new(s1, s2, rho))
}

proptest! {
    #[test]
    fn variances_shrink_with_more_samples(g in model(), k in 1u64..200) {
        prop_assert!(var_multipair(&g, k + 1) <= var_multipair(&g, k));
        prop_assert!(var_multineg(&g, k + 1) <= var_multineg(&g, k));
        prop_assert!((var_multineg(&g, 1) - var_multipair(&g, 1)).abs() < 1e-12);
    }

    #[test]
    fn min_negatives_is_tight(g in model(), l in 1u64..500) {
        let lambda = lambda_of(&g).unwrap();
        let target = var_multipair(&g, l);
        match min_negatives(lambda, l) {
            Ok(m) => {
                prop_assert!(var_multineg(&g, m) <= target + 1e-12);
                if m > 1 {
                    prop_assert!(var_multineg(&g, m - 1) > target - 1e-9 * target.max(1.0));
                }
                if let PairLimit::Finite(cap) = upper_limit_pairs(lambda) {
                    prop_assert!((l as f64) < cap * (1.0 + 1e-9));
                }
            }
            Err(TheoremError::Precondition { .. }) => {
                // No finite m reaches the l-pair variance.
                prop_assert!(var_multineg(&g, u64::MAX / 2) >= target - 1e-9 * target.max(1.0));
                if let PairLimit::Finite(cap) = upper_limit_pairs(lambda) {
                    prop_assert!(l as f64 >= cap * (1.0 - 1e-9));
                }
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }

    #[test]
    fn lambda_is_a_variance_ratio(g in model()) {
        let lambda = lambda_of(&g).unwrap();
        prop_assert!(lambda > 0.0);
        let expected = g.sigma2 * g.sigma2 / (g.sigma1 * g.sigma1 + g.sigma2 * g.sigma2 - 2.0 * g.sigma1 * g.sigma2 * g.rho);
        prop_assert!((lambda - expected).abs() <= 1e-12 * expected.max(1.0));
    }
}

#[test]
fn worked_point() {
    let g = GradientModel::new(1.0, 3.0, 0.0);
    let lambda = lambda_of(&g).unwrap();
    assert!((lambda - 0.9).abs() < 1e-15);
    assert_eq!(min_negatives(lambda, 5).unwrap(), 9);
    assert_eq!(var_multipair(&g, 5), 2.0);
    assert_eq!(var_multineg(&g, 9), 2.0);
    assert!(matches!(upper_limit_pairs(lambda), PairLimit::Finite(c) if (c - 10.0).abs() < 1e-9));
}

#[test]
fn invalid_correlation_is_reported() {
    let g = GradientModel::new(1.0, 1.0, 0.6);
    assert_eq!(multineg_validity(&g, 2), Validity::Valid);
    assert_eq!(multineg_validity(&g, 3), Validity::Invalid);
    let res = simulate_mse(&g, &SimConfig { l: 3, m: 3, trials: 5000, seed: 1 }).unwrap();
    assert_eq!(res.sampling_validity, Validity::Invalid);
    assert!(res.mse_multineg.is_none());
}

#[test]
fn monte_carlo_matches_closed_forms_with_correlation() {
    // Moderate sample size here; the full-size run lives in the acceptance suite.
    for (s1, s2, rho, l, m) in [(1.0, 2.0, 0.3, 4, 6), (2.0, 1.0, -0.4, 3, 5), (1.5, 1.5, 0.0, 7, 2)] {
        let g = GradientModel::new(s1, s2, rho).with_means(0.7, -0.2);
        let res = simulate_mse(&g, &SimConfig { l, m, trials: 200_000, seed: 42 }).unwrap();
        let pair = res.multipair;
        let neg = res.multineg.unwrap();
        let rel = |est: f64, exact: f64| (est - exact).abs() / exact;
        assert!(rel(pair.variance(), var_multipair(&g, l)) < 0.02);
        assert!(rel(neg.variance(), var_multineg(&g, m)) < 0.02);
        assert!(pair.bias().abs() <= 4.0 * pair.mean_std_error());
        assert!(neg.bias().abs() <= 4.0 * neg.mean_std_error());
    }
}

#[test]
fn simulation_is_deterministic() {
    let g = GradientModel::new(1.0, 3.0, 0.0);
    let cfg = SimConfig { l: 5, m: 9, trials: 10_001, seed: 9 };
    assert_eq!(simulate_mse(&g, &cfg).unwrap(), simulate_mse(&g, &cfg).unwrap());
}
