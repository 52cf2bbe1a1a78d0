//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storbid::domain::{BidCurve, SensitivityModel, StorageParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Daily-shaped positive prices with uniform noise.
pub fn random_prices(seed: u64, t_len: usize) -> Vec<f64> {
    let mut r = rng(seed);
    let phase: f64 = r.random_range(0.0..24.0);
    (0..t_len)
        .map(|t| {
            let h = (t as f64 + phase) * std::f64::consts::TAU / 24.0;
            40.0 + 18.0 * h.sin() + r.random_range(-12.0..12.0)
        })
        .collect()
}

/// Storage parameters used throughout the experiments.
pub fn reference_params() -> StorageParams {
    StorageParams {
        power_rating: 0.5,
        capacity: 1.0,
        efficiency: 0.9,
        cost_linear: 10.0,
        cost_quadratic: 0.0,
        num_segments: 10,
        initial_soc: 0.5,
    }
}

/// Best profit over `prices` from `e0` by dynamic programming on `points`
/// evenly spaced SoC values. Each step moves between grid points, so the
/// result is a lower bound that tightens with the grid.
pub fn dp_hindsight(prices: &[f64], params: &StorageParams, e0: f64, points: usize) -> f64 {
    let cap = params.capacity;
    let eta = params.efficiency;
    let h = cap / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| i as f64 * h).collect();
    let reward = |lambda: f64, from: f64, to: f64| -> Option<f64> {
        let d = to - from;
        if d < 0.0 {
            let p = -d * eta;
            (p <= params.power_rating + 1e-12)
                .then(|| lambda * p - params.cost_linear * p - params.cost_quadratic * p * p)
        } else {
            let b = d / eta;
            (b <= params.power_rating + 1e-12).then(|| -lambda * b)
        }
    };
    let mut value = vec![0.0; points];
    for &lambda in prices.iter().rev() {
        let next = value.clone();
        for (i, v) in value.iter_mut().enumerate() {
            *v = grid
                .iter()
                .zip(&next)
                .filter_map(|(&to, &nv)| reward(lambda, grid[i], to).map(|r| r + nv))
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    // start from the grid point nearest e0; tests use e0 on the grid
    let i0 = ((e0 / h).round() as usize).min(points - 1);
    value[i0]
}

/// Objective and feasibility of a segment dispatch under the clearing LP.
fn clearing_value(bid: &BidCurve, lambda: f64, e_prev: f64, params: &StorageParams, p: &[f64], b: &[f64]) -> Option<f64> {
    let eta = params.efficiency;
    let d = eta * b.iter().sum::<f64>() - p.iter().sum::<f64>() / eta;
    let tol = 1e-12;
    if d < -e_prev - tol || d > params.capacity - e_prev + tol {
        return None;
    }
    Some(
        (0..p.len())
            .map(|j| (lambda - bid.discharge_prices[j]) * p[j] + (bid.charge_prices[j] - lambda) * b[j])
            .sum(),
    )
}

/// Price-taker clearing optimum by enumerating LP vertices: every variable
/// at a bound, or all but one at bounds with the SoC window binding.
pub fn brute_force_clearing(bid: &BidCurve, lambda: f64, e_prev: f64, params: &StorageParams) -> f64 {
    let n = bid.num_segments();
    let m = 2 * n;
    let eta = params.efficiency;
    let q = &bid.segment_quantity;
    let coef = |k: usize| if k < n { -1.0 / eta } else { eta };
    let qty = |k: usize| q[k % n];
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << m) {
        let mut x: Vec<f64> = (0..m).map(|k| if mask >> k & 1 == 1 { qty(k) } else { 0.0 }).collect();
        let mut try_x = |x: &[f64]| {
            if let Some(v) = clearing_value(bid, lambda, e_prev, params, &x[..n], &x[n..]) {
                best = best.max(v);
            }
        };
        try_x(&x);
        for free in 0..m {
            let saved = x[free];
            let rest: f64 = (0..m).filter(|&k| k != free).map(|k| coef(k) * x[k]).sum();
            for bound in [-e_prev, params.capacity - e_prev] {
                let v = (bound - rest) / coef(free);
                if (0.0..=qty(free)).contains(&v) {
                    x[free] = v;
                    try_x(&x);
                }
            }
            x[free] = saved;
        }
    }
    best
}

/// Minimum bid cost `Σ S p − Σ D b` of delivering net output `y`, or `None`
/// when no dispatch within the SoC window delivers it.
fn min_bid_cost_at(bid: &BidCurve, y: f64, e_prev: f64, params: &StorageParams) -> Option<f64> {
    let eta = params.efficiency;
    let mut s: Vec<(f64, f64)> = bid.discharge_prices.iter().copied().zip(bid.segment_quantity.iter().copied()).collect();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut d: Vec<(f64, f64)> = bid.charge_prices.iter().copied().zip(bid.segment_quantity.iter().copied()).collect();
    d.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total: f64 = bid.segment_quantity.iter().sum();
    // cheapest cumulative cost of discharging P / best value of charging B
    let cum = |segs: &[(f64, f64)], x: f64| {
        let mut left = x;
        let mut c = 0.0;
        for &(price, qty) in segs {
            let take = left.min(qty);
            c += take * price;
            left -= take;
        }
        c
    };
    let mut b_lo = 0.0f64.max(-y);
    let mut b_hi = total.min(total - y);
    let (lo, hi) = (-e_prev, params.capacity - e_prev);
    // window on η B − (y + B)/η
    let k = eta - 1.0 / eta;
    if k.abs() < 1e-15 {
        let d0 = -y / eta;
        if d0 < lo - 1e-12 || d0 > hi + 1e-12 {
            return None;
        }
    } else {
        let (a, c) = ((lo + y / eta) / k, (hi + y / eta) / k);
        b_lo = b_lo.max(a.min(c));
        b_hi = b_hi.min(a.max(c));
    }
    if b_lo > b_hi + 1e-12 {
        return None;
    }
    let b_hi = b_hi.max(b_lo);
    let mut cands = vec![b_lo, b_hi];
    let mut acc = 0.0;
    for &(_, qty) in &d {
        acc += qty;
        cands.push(acc);
    }
    acc = 0.0;
    for &(_, qty) in &s {
        acc += qty;
        cands.push(acc - y);
    }
    cands
        .into_iter()
        .filter(|b| *b >= b_lo && *b <= b_hi)
        .map(|b| cum(&s, y + b) - cum(&d, b))
        .reduce(f64::min)
}

/// Price-maker clearing optimum by a grid over net output `y` with step `dy`.
pub fn grid_price_maker(
    bid: &BidCurve,
    lambda: f64,
    sens: &SensitivityModel,
    e_prev: f64,
    params: &StorageParams,
    dy: f64,
) -> f64 {
    let total: f64 = bid.segment_quantity.iter().sum();
    let steps = (2.0 * total / dy).round() as usize;
    (0..=steps)
        .filter_map(|i| {
            let y = -total + i as f64 * dy;
            min_bid_cost_at(bid, y, e_prev, params).map(|c| sens.revenue(lambda, y) - c)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Central difference of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}
