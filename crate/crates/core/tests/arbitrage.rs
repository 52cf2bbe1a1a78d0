mod common;

use common::*;
use proptest::prelude::*;
use storbid::arbitrage::{
    kkt_residuals, opportunity_value, solve_hindsight, solve_hindsight_pricemaker, ArbProblem, IpmOptions,
};
use storbid::bids::compute_theta_segments;
use storbid::domain::{soc_grid, SensitivityModel, StorageParams};

fn params_strategy() -> impl Strategy<Value = StorageParams> {
    (0.1f64..1.0, 0.5f64..2.0, 0.6f64..=1.0, 0.0f64..20.0, 0.0f64..10.0).prop_map(|(r, e, eta, c1, c2)| StorageParams {
        power_rating: r,
        capacity: e,
        efficiency: eta,
        cost_linear: c1,
        cost_quadratic: c2,
        num_segments: 5,
        initial_soc: 0.5 * e,
    })
}

#[test]
fn dp_oracle_agrees_on_a_few_days() {
    let params = reference_params();
    for seed in 0..4 {
        let prices = random_prices(seed, 24);
        let ipm = solve_hindsight(&prices, &params, 0.5).unwrap().objective;
        let dp = dp_hindsight(&prices, &params, 0.5, 201);
        assert!(dp <= ipm + 1e-6, "grid optimum exceeds the continuous one");
        assert!(rel_err(ipm, dp, 1.0) < 5e-3, "ipm {ipm} dp {dp}");
    }
}

#[test]
fn two_interval_spread_is_captured() {
    // buy 0.5 at 10, sell 0.45 at 50 after losses
    let params = StorageParams { initial_soc: 0.0, ..reference_params() };
    let sol = solve_hindsight(&[10.0, 50.0], &params, 0.0).unwrap();
    let want = -10.0 * 0.5 + (50.0 - 10.0) * 0.5 * 0.9 * 0.9;
    assert!((sol.objective - want).abs() < 1e-7, "{} vs {want}", sol.objective);
}

#[test]
fn empty_horizon_has_zero_value() {
    assert_eq!(opportunity_value(&[], &reference_params(), 0.3).unwrap(), 0.0);
}

#[test]
fn out_of_range_soc_is_rejected() {
    let prob = ArbProblem::price_taker(&[30.0; 4], &reference_params(), 1.5);
    assert!(prob.solve(&IpmOptions::default()).unwrap_err().is_validation());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solutions_satisfy_kkt(seed in 0u64..100_000, params in params_strategy(), t_len in 1usize..30) {
        let prices = random_prices(seed, t_len);
        let prob = ArbProblem::price_taker(&prices, &params, params.initial_soc);
        let sol = prob.solve(&IpmOptions::default()).unwrap();
        let scale = prices.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(kkt_residuals(&prob, &sol).max() < 1e-6 * scale);
        prop_assert!((prob.objective(&sol.p, &sol.b) - sol.objective).abs() < 1e-9 * scale);
    }

    #[test]
    fn value_is_concave_in_soc(seed in 0u64..100_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let params = reference_params();
        let prices = random_prices(seed, 24);
        let v = |e: f64| opportunity_value(&prices, &params, e).unwrap();
        let mid = 0.5 * (a + b);
        prop_assert!(v(mid) >= 0.5 * (v(a) + v(b)) - 1e-6);
    }

    #[test]
    fn theta_non_increasing_in_soc(seed in 0u64..100_000, eta in 0.6f64..=1.0) {
        let params = StorageParams { efficiency: eta, ..reference_params() };
        let theta = compute_theta_segments(&random_prices(seed, 24), &params, &soc_grid(&params)).unwrap();
        for w in theta.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn price_maker_beats_the_taker_dispatch_under_impact(seed in 0u64..100_000, alpha in 1.0f64..30.0) {
        let params = reference_params();
        let prices = random_prices(seed, 24);
        let sens = SensitivityModel::linear(alpha);
        let maker = solve_hindsight_pricemaker(&prices, &sens, &params, 0.5).unwrap();
        let taker = solve_hindsight(&prices, &params, 0.5).unwrap();
        let prob = ArbProblem { prices: prices.clone(), params, initial_soc: 0.5, sensitivity: sens };
        prop_assert!(maker.objective >= prob.objective(&taker.p, &taker.b) - 1e-6);
        prop_assert!(maker.objective <= taker.objective + 1e-6);
    }

    #[test]
    fn cubic_maker_satisfies_kkt(seed in 0u64..100_000, alpha in 10.0f64..200.0) {
        let params = reference_params();
        let prices = random_prices(seed, 24);
        let prob = ArbProblem { prices, params, initial_soc: 0.5, sensitivity: SensitivityModel::cubic(alpha) };
        let sol = prob.solve(&IpmOptions::default()).unwrap();
        prop_assert!(kkt_residuals(&prob, &sol).max() < 1e-3);
    }
}
