mod common;

use common::*;
use proptest::prelude::*;
use storbid::bids::form_bids;
use storbid::clearing::{clear, clear_price_maker, clear_price_taker, settle_profit};
use storbid::domain::{BidCurve, SensitivityModel, StorageParams};

fn instance() -> impl Strategy<Value = (BidCurve, StorageParams, f64, f64)> {
    (1usize..=3, 0.6f64..=1.0, any::<u64>(), -20.0f64..120.0, 0.0f64..=1.0).prop_flat_map(|(n, eta, _, lambda, e)| {
        (
            prop::collection::vec(0.0f64..90.0, n),
            prop::collection::vec(0.05f64..0.4, n),
            Just((n, eta, lambda, e)),
        )
            .prop_map(|(theta, qty, (n, eta, lambda, e))| {
                let params = StorageParams { efficiency: eta, num_segments: n, ..reference_params() };
                let mut bid = form_bids(&theta, &params);
                bid.segment_quantity = qty;
                (bid, params, lambda, e)
            })
    })
}

#[test]
fn empty_window_forces_idle() {
    let params = StorageParams { num_segments: 2, ..reference_params() };
    let bid = form_bids(&[30.0, 20.0], &params);
    let r = clear_price_taker(&bid, 5.0, 0.0, &params).unwrap();
    assert_eq!(r.p_total, 0.0);
    assert!((r.b_total - 0.5).abs() < 1e-12);
    let r = clear_price_taker(&bid, 500.0, 0.0, &params).unwrap();
    assert_eq!(r.p_total, 0.0);
}

#[test]
fn invalid_soc_is_rejected() {
    let params = StorageParams { num_segments: 1, ..reference_params() };
    let bid = form_bids(&[1.0], &params);
    assert!(clear_price_taker(&bid, 5.0, 1.2, &params).unwrap_err().is_validation());
}

#[test]
fn broken_chain_is_rejected() {
    let params = StorageParams { num_segments: 1, ..reference_params() };
    let bid = form_bids(&[20.0], &params);
    let a = clear_price_taker(&bid, 60.0, 0.5, &params).unwrap();
    let b = clear_price_taker(&bid, 60.0, 0.5, &params).unwrap();
    assert!(settle_profit(std::slice::from_ref(&a), &params).is_ok());
    assert!(settle_profit(&[a, b], &params).is_err());
}

#[test]
fn price_maker_matches_grid_on_a_few_instances() {
    let mut r = rng(17);
    for sens in [SensitivityModel::linear(10.0), SensitivityModel::cubic(100.0)] {
        for _ in 0..10 {
            let params = reference_params();
            let theta: Vec<f64> = (0..10).map(|_| rand::Rng::random_range(&mut r, 0.0..80.0)).collect();
            let bid = form_bids(&theta, &params);
            let lambda = rand::Rng::random_range(&mut r, 0.0..100.0);
            let e = rand::Rng::random_range(&mut r, 0.0..=1.0);
            let got = clear_price_maker(&bid, lambda, &sens, e, &params).unwrap().objective;
            let want = grid_price_maker(&bid, lambda, &sens, e, &params, 1e-4);
            assert!(want - got <= 1e-3, "grid {want} clearing {got}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn taker_clearing_is_optimal((bid, params, lambda, e) in instance()) {
        let got = clear_price_taker(&bid, lambda, e, &params).unwrap();
        let want = brute_force_clearing(&bid, lambda, e, &params);
        prop_assert!((got.objective - want).abs() <= 1e-6, "{} vs {}", got.objective, want);
        prop_assert!((0.0..=params.capacity).contains(&got.soc_after));
    }

    #[test]
    fn maker_never_beats_taker_objective((bid, params, lambda, e) in instance(), alpha in 0.1f64..30.0) {
        // the impact only lowers revenue for the same dispatch
        let maker = clear(&bid, lambda, &SensitivityModel::linear(alpha), e, &params).unwrap();
        let taker = clear(&bid, lambda, &SensitivityModel::PRICE_TAKER, e, &params).unwrap();
        prop_assert!(maker.objective <= taker.objective + 1e-9);
        prop_assert!((0.0..=params.capacity).contains(&maker.soc_after));
    }

    #[test]
    fn no_simultaneous_dispatch_for_sound_bids(theta in prop::collection::vec(0.0f64..90.0, 1..6), lambda in -20.0f64..120.0, e in 0.0f64..=1.0) {
        let params = StorageParams { num_segments: theta.len(), ..reference_params() };
        let bid = form_bids(&theta, &params);
        let eta2 = params.efficiency.powi(2);
        let max_d = bid.charge_prices.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let min_s = bid.discharge_prices.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        // a round trip through the battery must not pay
        prop_assume!(max_d <= eta2 * min_s + (1.0 - eta2) * lambda);
        let r = clear_price_taker(&bid, lambda, e, &params).unwrap();
        prop_assert!(r.p_total < 1e-12 || r.b_total < 1e-12);
    }
}
