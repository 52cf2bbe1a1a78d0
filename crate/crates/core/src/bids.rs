//! Segmented bids from the marginal value of stored energy.
//!
//! For SoC level `e_j` with opportunity value slope `θ_j`, discharging one
//! MWh from the grid costs `∂c/∂p + θ_j/η` and charging one MWh earns the
//! future `θ_j η`. These are the discharge (`S_j`) and charge (`D_j`)
//! prices. `∂c/∂p` is taken at `p = 0`, so quadratic costs enter only
//! through clearing.

use crate::arbitrage::{ArbProblem, IpmOptions};
use crate::domain::{soc_grid, BidCurve, StorageParams};
use crate::error::Result;
use crate::exec;

/// First-transition dual of the horizon program started at each SoC level.
pub fn compute_theta_segments(prices: &[f64], params: &StorageParams, soc_levels: &[f64]) -> Result<Vec<f64>> {
    compute_theta_segments_with(prices, params, soc_levels, &IpmOptions::default())
}

pub fn compute_theta_segments_with(
    prices: &[f64],
    params: &StorageParams,
    soc_levels: &[f64],
    opts: &IpmOptions,
) -> Result<Vec<f64>> {
    if prices.is_empty() {
        return Ok(vec![0.0; soc_levels.len()]);
    }
    exec::map(soc_levels, |&e| {
        ArbProblem::price_taker(prices, params, e)
            .solve(opts)
            .map(|s| s.theta[0])
    })
    .into_iter()
    .collect()
}

/// `S_j = C1 + θ_j/η`, `D_j = θ_j η`, one segment of `R/N` per SoC level.
pub fn form_bids(theta: &[f64], params: &StorageParams) -> BidCurve {
    let eta = params.efficiency;
    let c_p = params.marginal_discharge_cost(0.0);
    let n = theta.len();
    let levels = if n == params.num_segments {
        soc_grid(params)
    } else {
        let w = params.capacity / n as f64;
        (0..n).map(|j| (j as f64 + 0.5) * w).collect()
    };
    BidCurve {
        soc_levels: levels,
        discharge_prices: theta.iter().map(|th| c_p + th / eta).collect(),
        charge_prices: theta.iter().map(|th| th * eta).collect(),
        segment_quantity: vec![params.power_rating / n as f64; n],
    }
}

/// SoC positions that value each segment from the current SoC `e`.
///
/// Discharge segment `j` (ascending) drains the slice `N − 1 − j` slices
/// below `e`; charge segment `j` fills the slice `j` slices above it. Each
/// position is the slice midpoint, clamped into `[0, E]`.
pub fn anchored_levels(e: f64, params: &StorageParams) -> (Vec<f64>, Vec<f64>) {
    let n = params.num_segments;
    let q = params.segment_quantity();
    let eta = params.efficiency;
    let cap = params.capacity;
    let discharge = (0..n)
        .map(|j| (e - ((n - 1 - j) as f64 + 0.5) * q / eta).clamp(0.0, cap))
        .collect();
    let charge = (0..n).map(|j| (e + (j as f64 + 0.5) * q * eta).clamp(0.0, cap)).collect();
    (discharge, charge)
}

/// Duals at distinct levels only, mapped back onto `levels`.
pub fn theta_at_levels(prices: &[f64], params: &StorageParams, levels: &[f64], opts: &IpmOptions) -> Result<Vec<f64>> {
    let mut distinct: Vec<f64> = levels.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let theta = compute_theta_segments_with(prices, params, &distinct, opts)?;
    Ok(levels
        .iter()
        .map(|e| theta[distinct.binary_search_by(|d| d.total_cmp(e)).unwrap()])
        .collect())
}

/// Bids with separately valued discharge and charge segments.
pub fn form_bids_split(theta_discharge: &[f64], theta_charge: &[f64], params: &StorageParams) -> BidCurve {
    let mut bid = form_bids(theta_discharge, params);
    bid.charge_prices = theta_charge.iter().map(|th| th * params.efficiency).collect();
    bid
}

/// Bids formed from `θ + ε Z`.
pub fn perturb_bids(theta: &[f64], epsilon: f64, z: &[f64], params: &StorageParams) -> BidCurve {
    let shifted: Vec<f64> = theta.iter().zip(z).map(|(t, z)| t + epsilon * z).collect();
    form_bids(&shifted, params)
}

/// Sorts a non-monotone curve into merit order, logging the event.
pub fn ensure_monotone(bid: &mut BidCurve) -> bool {
    if bid.is_monotone() {
        return false;
    }
    log::debug!("bid curve not monotone in SoC; sorting segments");
    bid.sort_segments();
    true
}
