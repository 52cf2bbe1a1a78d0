//! Single-interval market clearing of a bid curve and profit settlement.
//!
//! Given bids `(S_j, D_j)` of quantity `q_j`, the market dispatches
//!
//! ```text
//! max  π Σ_j (p_j − b_j) − Σ_j (S_j p_j − D_j b_j)
//! s.t. 0 ≤ p_j, b_j ≤ q_j,   −e_prev ≤ η Σ b − Σ p / η ≤ E − e_prev
//! ```
//!
//! with `π = λ` for a price taker. A price maker earns `(λ − f(y)) y` on the
//! net output `y`; its clearing searches the effective price `π` at which
//! the price-taker response meets marginal revenue.

use serde::{Deserialize, Serialize};

use crate::domain::{BidCurve, SensitivityKind, SensitivityModel, StorageParams};
use crate::error::{Error, Result};

/// Dispatch of one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingResult {
    pub p_seg: Vec<f64>,
    pub b_seg: Vec<f64>,
    pub p_total: f64,
    pub b_total: f64,
    pub realized_price: f64,
    pub soc_before: f64,
    pub soc_after: f64,
    /// Value of the clearing objective at the dispatch.
    pub objective: f64,
}

impl ClearingResult {
    pub fn net(&self) -> f64 {
        self.p_total - self.b_total
    }
}

/// Allowed range of `η Σ b − Σ p / η`.
fn soc_window(e_prev: f64, params: &StorageParams) -> (f64, f64) {
    (-e_prev, params.capacity - e_prev)
}

/// One candidate adjustment on the SoC-change axis.
struct Move {
    /// Objective lost per unit of SoC change.
    cost: f64,
    /// Largest SoC change this move supplies.
    room: f64,
    seg: usize,
    discharge: bool,
}

/// Exact maximizer of the price-taker clearing LP at price `pi`.
///
/// Activates every segment with strictly positive margin, then restores the
/// SoC window with the cheapest moves per unit of SoC change. With a single
/// coupling constraint this greedy is an exact LP solution.
fn greedy_dispatch(bid: &BidCurve, pi: f64, e_prev: f64, params: &StorageParams) -> (Vec<f64>, Vec<f64>) {
    let n = bid.num_segments();
    let eta = params.efficiency;
    let q = &bid.segment_quantity;
    let mut p = vec![0.0; n];
    let mut b = vec![0.0; n];
    for j in 0..n {
        if pi - bid.discharge_prices[j] > 0.0 {
            p[j] = q[j];
        }
        if bid.charge_prices[j] - pi > 0.0 {
            b[j] = q[j];
        }
    }
    let (lo, hi) = soc_window(e_prev, params);
    let delta: f64 = eta * b.iter().sum::<f64>() - p.iter().sum::<f64>() / eta;

    if delta > hi || delta < lo {
        let lowering = delta > hi;
        let mut need = if lowering { delta - hi } else { lo - delta };
        let mut moves = Vec::with_capacity(2 * n);
        for j in 0..n {
            let mp = pi - bid.discharge_prices[j];
            let mb = bid.charge_prices[j] - pi;
            if lowering {
                // cut charge, or add unprofitable discharge
                if b[j] > 0.0 {
                    moves.push(Move { cost: mb / eta, room: q[j] * eta, seg: j, discharge: false });
                }
                if p[j] == 0.0 {
                    moves.push(Move { cost: -mp * eta, room: q[j] / eta, seg: j, discharge: true });
                }
            } else {
                // cut discharge, or add unprofitable charge
                if p[j] > 0.0 {
                    moves.push(Move { cost: mp * eta, room: q[j] / eta, seg: j, discharge: true });
                }
                if b[j] == 0.0 {
                    moves.push(Move { cost: -mb / eta, room: q[j] * eta, seg: j, discharge: false });
                }
            }
        }
        moves.sort_by(|a, b| a.cost.total_cmp(&b.cost));
        for m in moves {
            if need <= 0.0 {
                break;
            }
            let used = m.room.min(need);
            need -= used;
            let j = m.seg;
            match (lowering, m.discharge) {
                (true, false) => b[j] -= used / eta,
                (true, true) => p[j] += used * eta,
                (false, true) => p[j] -= used * eta,
                (false, false) => b[j] += used / eta,
            }
        }
        for j in 0..n {
            p[j] = p[j].clamp(0.0, q[j]);
            b[j] = b[j].clamp(0.0, q[j]);
        }
    }
    (p, b)
}

fn bid_cost(bid: &BidCurve, p: &[f64], b: &[f64]) -> f64 {
    (0..bid.num_segments())
        .map(|j| bid.discharge_prices[j] * p[j] - bid.charge_prices[j] * b[j])
        .sum()
}

fn finish(
    bid: &BidCurve,
    p: Vec<f64>,
    b: Vec<f64>,
    realized_price: f64,
    revenue: f64,
    e_prev: f64,
    params: &StorageParams,
) -> Result<ClearingResult> {
    let p_total: f64 = p.iter().sum();
    let b_total: f64 = b.iter().sum();
    let raw = params.next_soc(e_prev, p_total, b_total);
    let slack = 1e-9 * params.capacity.max(1.0);
    if raw < -slack || raw > params.capacity + slack {
        return Err(Error::Internal(format!(
            "clearing left the SoC window: {raw} outside [0, {}]",
            params.capacity
        )));
    }
    let objective = revenue - bid_cost(bid, &p, &b);
    Ok(ClearingResult {
        p_total,
        b_total,
        realized_price,
        soc_before: e_prev,
        soc_after: raw.clamp(0.0, params.capacity),
        objective,
        p_seg: p,
        b_seg: b,
    })
}

fn check_inputs(bid: &BidCurve, lambda: f64, e_prev: f64, params: &StorageParams) -> Result<()> {
    bid.validate()?;
    if !lambda.is_finite() {
        return Err(Error::invalid("clearing price must be finite"));
    }
    if bid.discharge_prices.iter().chain(&bid.charge_prices).any(|v| !v.is_finite()) {
        return Err(Error::invalid("bid prices must be finite"));
    }
    if !(0.0..=params.capacity).contains(&e_prev) {
        return Err(Error::invalid("soc before clearing out of range"));
    }
    Ok(())
}

/// Price-taker clearing at price `lambda`.
pub fn clear_price_taker(bid: &BidCurve, lambda: f64, e_prev: f64, params: &StorageParams) -> Result<ClearingResult> {
    check_inputs(bid, lambda, e_prev, params)?;
    let (p, b) = greedy_dispatch(bid, lambda, e_prev, params);
    let y = p.iter().sum::<f64>() - b.iter().sum::<f64>();
    finish(bid, p, b, lambda, lambda * y, e_prev, params)
}

/// Price-maker clearing: maximizes `(λ − f(y)) y − Σ (S p − D b)`.
///
/// The price-taker response `y(π)` is non-decreasing in `π` while the
/// marginal-revenue inverse `g⁻¹(λ − π)` is decreasing, so their crossing
/// is found by bisection. If `y(π)` jumps there, the dispatch is the convex
/// combination of the two bracketing responses that hits `g⁻¹(λ − π)`.
pub fn clear_price_maker(
    bid: &BidCurve,
    lambda: f64,
    sens: &SensitivityModel,
    e_prev: f64,
    params: &StorageParams,
) -> Result<ClearingResult> {
    check_inputs(bid, lambda, e_prev, params)?;
    sens.validate()?;
    if sens.kind == SensitivityKind::PriceTaker || sens.is_price_taker() {
        return clear_price_taker(bid, lambda, e_prev, params);
    }
    let net = |pi: f64| {
        let (p, b) = greedy_dispatch(bid, pi, e_prev, params);
        let y = p.iter().sum::<f64>() - b.iter().sum::<f64>();
        (p, b, y)
    };
    let target = |pi: f64| sens.impact_cost_slope_inverse(lambda - pi);
    let r = params.power_rating;
    let g_r = sens.impact_cost_slope(r);
    let bid_lo = bid
        .discharge_prices
        .iter()
        .chain(&bid.charge_prices)
        .fold(f64::INFINITY, |m, v| m.min(*v));
    let bid_hi = bid
        .discharge_prices
        .iter()
        .chain(&bid.charge_prices)
        .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut lo = bid_lo.min(lambda - g_r) - 1.0;
    let mut hi = bid_hi.max(lambda + g_r) + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if net(mid).2 < target(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (p_lo, b_lo, y_lo) = net(lo);
    let (p_hi, b_hi, y_hi) = net(hi);
    let y_star = target(0.5 * (lo + hi)).clamp(y_lo, y_hi);
    let tau = if y_hi - y_lo > 1e-15 {
        (y_star - y_lo) / (y_hi - y_lo)
    } else {
        0.0
    };
    let mix = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, z)| x + tau * (z - x)).collect::<Vec<_>>();
    let p = mix(&p_lo, &p_hi);
    let b = mix(&b_lo, &b_hi);
    let y = p.iter().sum::<f64>() - b.iter().sum::<f64>();
    finish(bid, p, b, sens.realized_price(lambda, y), sens.revenue(lambda, y), e_prev, params)
}

/// Clears with the price-taker or price-maker rule according to `sens`.
pub fn clear(
    bid: &BidCurve,
    lambda: f64,
    sens: &SensitivityModel,
    e_prev: f64,
    params: &StorageParams,
) -> Result<ClearingResult> {
    if sens.is_price_taker() {
        clear_price_taker(bid, lambda, e_prev, params)
    } else {
        clear_price_maker(bid, lambda, sens, e_prev, params)
    }
}

/// Cumulative profit `Σ π_t (p_t − b_t) − c(p_t, b_t)` of a SoC-consistent run.
pub fn settle_profit(results: &[ClearingResult], params: &StorageParams) -> Result<f64> {
    let mut total = 0.0;
    for (i, r) in results.iter().enumerate() {
        if i > 0 {
            let prev = results[i - 1].soc_after;
            if (r.soc_before - prev).abs() > 1e-9 * params.capacity.max(1.0) {
                return Err(Error::invalid(format!(
                    "soc chain broken at interval {i}: {} after, {} before",
                    prev, r.soc_before
                )));
            }
        }
        total += interval_profit(r, params);
    }
    Ok(total)
}

/// Settled profit of one interval.
pub fn interval_profit(r: &ClearingResult, params: &StorageParams) -> f64 {
    r.realized_price * r.net() - params.cost(r.p_total, r.b_total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(eta: f64) -> StorageParams {
        StorageParams {
            power_rating: 0.5,
            capacity: 1.0,
            efficiency: eta,
            cost_linear: 10.0,
            cost_quadratic: 0.0,
            num_segments: 2,
            initial_soc: 0.5,
        }
    }

    fn curve(s: &[f64], d: &[f64], q: f64) -> BidCurve {
        let n = s.len();
        BidCurve {
            soc_levels: (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect(),
            discharge_prices: s.to_vec(),
            charge_prices: d.to_vec(),
            segment_quantity: vec![q; n],
        }
    }

    #[test]
    fn two_segment_discharge() {
        let bid = curve(&[30.0, 40.0], &[16.2, 10.0], 0.25);
        let r = clear_price_taker(&bid, 35.0, 0.9, &params(0.9)).unwrap();
        assert!((r.p_seg[0] - 0.25).abs() < 1e-12 && r.p_seg[1] == 0.0);
        assert!((r.p_total - 0.25).abs() < 1e-12 && r.b_total == 0.0);
        assert!((r.soc_after - (0.9 - 0.25 / 0.9)).abs() < 1e-12);
    }

    #[test]
    fn cheap_price_charges_up_to_capacity() {
        let p = StorageParams { power_rating: 1.0, num_segments: 2, ..params(0.9) };
        let bid = curve(&[60.0, 50.0], &[40.0, 30.0], 0.5);
        let r = clear_price_taker(&bid, 5.0, 0.0, &p).unwrap();
        // headroom 1 MWh admits 1/0.9 ≥ R of charge
        assert!((r.b_total - 1.0).abs() < 1e-12);
        let r = clear_price_taker(&bid, 5.0, 0.55, &p).unwrap();
        assert!((r.b_total - 0.45 / 0.9).abs() < 1e-12);
        assert!((r.soc_after - 1.0).abs() < 1e-12);
        // the higher-margin segment keeps priority
        assert!((r.b_seg[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn price_inside_spread_is_idle() {
        let bid = curve(&[30.0, 40.0], &[16.2, 10.0], 0.25);
        let r = clear_price_taker(&bid, 20.0, 0.5, &params(0.9)).unwrap();
        assert_eq!(r.p_total + r.b_total, 0.0);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn ties_do_not_dispatch() {
        let bid = curve(&[30.0, 40.0], &[16.2, 10.0], 0.25);
        let r = clear_price_taker(&bid, 30.0, 0.5, &params(0.9)).unwrap();
        assert_eq!(r.p_total, 0.0);
        let r = clear_price_taker(&bid, 16.2, 0.5, &params(0.9)).unwrap();
        assert_eq!(r.b_total, 0.0);
    }

    fn single_segment_maker(sens: SensitivityModel) -> ClearingResult {
        let p = StorageParams {
            power_rating: 1.0,
            capacity: 1.0,
            efficiency: 1.0,
            cost_linear: 0.0,
            num_segments: 1,
            ..params(1.0)
        };
        let bid = curve(&[0.0], &[0.0], 1.0);
        clear_price_maker(&bid, 100.0, &sens, 1.0, &p).unwrap()
    }

    #[test]
    fn linear_maker_hits_power_limit() {
        let r = single_segment_maker(SensitivityModel::linear(10.0));
        assert!((r.net() - 1.0).abs() < 1e-9);
        assert!((r.realized_price - 90.0).abs() < 1e-9);
        assert!((interval_profit(&r, &StorageParams { cost_linear: 0.0, ..params(1.0) }) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn cubic_maker_interior() {
        let r = single_segment_maker(SensitivityModel::cubic(100.0));
        assert!((r.net() - 0.25f64.cbrt()).abs() < 1e-6, "y = {}", r.net());
    }

    #[test]
    fn vanishing_impact_is_price_taker() {
        let bid = curve(&[30.0, 40.0], &[16.2, 10.0], 0.25);
        let pt = clear_price_taker(&bid, 45.0, 0.9, &params(0.9)).unwrap();
        for sens in [SensitivityModel::linear(1e-9), SensitivityModel::cubic(1e-9)] {
            let pm = clear_price_maker(&bid, 45.0, &sens, 0.9, &params(0.9)).unwrap();
            for j in 0..2 {
                assert!((pm.p_seg[j] - pt.p_seg[j]).abs() <= 1e-6);
                assert!((pm.b_seg[j] - pt.b_seg[j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn settlement() {
        let p = params(0.9);
        assert_eq!(settle_profit(&[], &p).unwrap(), 0.0);
        let bid = curve(&[30.0, 40.0], &[16.2, 10.0], 0.25);
        let a = clear_price_taker(&bid, 35.0, 0.9, &p).unwrap();
        let b = clear_price_taker(&bid, 5.0, a.soc_after, &p).unwrap();
        let total = settle_profit(&[a.clone(), b.clone()], &p).unwrap();
        let expect = 35.0 * 0.25 - 10.0 * 0.25 - 5.0 * b.b_total;
        assert!((total - expect).abs() < 1e-12);
        let broken = ClearingResult { soc_before: 0.1, ..b };
        assert!(settle_profit(&[a, broken], &p).is_err());
    }
}
