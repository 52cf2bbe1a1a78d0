mod common;

use common::*;
use proptest::prelude::*;
use storbid::bids::{anchored_levels, compute_theta_segments, ensure_monotone, form_bids, perturb_bids};
use storbid::domain::StorageParams;

#[test]
fn anchored_levels_bracket_the_soc() {
    let params = reference_params();
    let (d, c) = anchored_levels(0.5, &params);
    assert!(d.iter().all(|v| *v < 0.5) && c.iter().all(|v| *v > 0.5));
    assert!(d.windows(2).all(|w| w[0] < w[1]) && c.windows(2).all(|w| w[0] < w[1]));
    let (d, _) = anchored_levels(0.0, &params);
    assert!(d.iter().all(|v| *v == 0.0));
}

#[test]
fn sorting_restores_merit_order() {
    let params = StorageParams { num_segments: 3, ..reference_params() };
    let mut bid = form_bids(&[10.0, 30.0, 20.0], &params);
    assert!(ensure_monotone(&mut bid));
    assert!(bid.is_monotone());
    assert!(!ensure_monotone(&mut bid));
}

proptest! {
    #[test]
    fn bids_never_cross(theta in prop::collection::vec(0.0f64..300.0, 1..15), eta in 0.05f64..=1.0, c1 in 0.0f64..50.0) {
        let params = StorageParams { efficiency: eta, cost_linear: c1, num_segments: theta.len(), ..reference_params() };
        let bid = form_bids(&theta, &params);
        for j in 0..theta.len() {
            prop_assert!(bid.discharge_prices[j] >= bid.charge_prices[j]);
        }
        prop_assert!(bid.validate().is_ok());
    }

    #[test]
    fn zero_noise_perturbation_is_identity(theta in prop::collection::vec(0.0f64..100.0, 1..8), eps in 0.0f64..5.0) {
        let params = StorageParams { num_segments: theta.len(), ..reference_params() };
        let z = vec![0.0; theta.len()];
        prop_assert_eq!(perturb_bids(&theta, eps, &z, &params), form_bids(&theta, &params));
    }

    #[test]
    fn theta_bids_are_monotone(seed in 0u64..50_000) {
        let params = reference_params();
        let theta = compute_theta_segments(&random_prices(seed, 24), &params, &storbid::domain::soc_grid(&params)).unwrap();
        let mut bid = form_bids(&theta, &params);
        // rounding may leave ties out of order by a hair at most
        let reordered = ensure_monotone(&mut bid);
        prop_assert!(!reordered || theta.windows(2).all(|w| w[1] - w[0] < 1e-6));
    }
}
