//! Feature windows and hindsight labels.

use crate::arbitrage::{solve_arbitrage_with, solve_hindsight_pricemaker_with, ArbProblem, IpmOptions};
use crate::domain::{ArbSolution, FeatureWindow, PriceSeries, Sample, SensitivityModel, StorageParams, FEATURE_LOOKBACK};
use crate::error::{Error, Result};
use crate::exec;

/// Channel-major trailing window ending just before interval `t`.
pub fn feature_window(series: &PriceSeries, t: usize) -> Result<Vec<f64>> {
    if t < FEATURE_LOOKBACK || t > series.len() {
        return Err(Error::shape(format!(
            "interval {t} lacks a {FEATURE_LOOKBACK}-interval history in a series of {}",
            series.len()
        )));
    }
    Ok(series
        .channels()
        .iter()
        .flat_map(|c| c[t - FEATURE_LOOKBACK..t].iter().copied())
        .collect())
}

fn hindsight(
    prices: &[f64],
    params: &StorageParams,
    sens: &SensitivityModel,
    e0: f64,
    opts: &IpmOptions,
) -> Result<ArbSolution> {
    if sens.is_price_taker() {
        solve_arbitrage_with(&ArbProblem::price_taker(prices, params, e0), opts)
    } else {
        solve_hindsight_pricemaker_with(prices, sens, params, e0, opts)
    }
}

/// SoC entering every interval along per-day hindsight solves with the
/// terminal SoC carried into the next day. Element `t` is the SoC before `t`.
pub fn day_chained_soc(series: &PriceSeries, params: &StorageParams, sens: &SensitivityModel) -> Result<Vec<f64>> {
    chained_soc(series, params, sens, &IpmOptions::default())
}

fn chained_soc(series: &PriceSeries, params: &StorageParams, sens: &SensitivityModel, opts: &IpmOptions) -> Result<Vec<f64>> {
    let day = series.intervals_per_day();
    let mut out = Vec::with_capacity(series.len() + 1);
    let mut e = params.initial_soc;
    out.push(e);
    for chunk in series.rtp.chunks(day) {
        let sol = hindsight(chunk, params, sens, e, opts)?;
        for &soc in &sol.e {
            out.push(soc.clamp(0.0, params.capacity));
        }
        e = *out.last().unwrap();
    }
    Ok(out)
}

/// Price-taker dataset; see [`build_dataset_with`].
pub fn build_dataset(series: &PriceSeries, params: &StorageParams, horizon: usize, stride: usize) -> Result<Vec<Sample>> {
    build_dataset_with(series, params, &SensitivityModel::PRICE_TAKER, horizon, stride)
}

/// One sample per decision interval `t = 24, 24 + stride, …` with a full
/// forward horizon. Labels solve the hindsight program over `[t, t + T)` from
/// the day-chained SoC entering `t`.
pub fn build_dataset_with(
    series: &PriceSeries,
    params: &StorageParams,
    sens: &SensitivityModel,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    build_dataset_solver(series, params, sens, horizon, stride, &IpmOptions::default())
}

/// As [`build_dataset_with`] with explicit solver options for the labels.
pub fn build_dataset_solver(
    series: &PriceSeries,
    params: &StorageParams,
    sens: &SensitivityModel,
    horizon: usize,
    stride: usize,
    opts: &IpmOptions,
) -> Result<Vec<Sample>> {
    series.validate()?;
    params.validate()?;
    sens.validate()?;
    if horizon == 0 || stride == 0 {
        return Err(Error::invalid("horizon and stride must be positive"));
    }
    if series.len() < FEATURE_LOOKBACK + horizon {
        return Err(Error::invalid(format!(
            "series of {} intervals is shorter than one window ({} + {horizon})",
            series.len(),
            FEATURE_LOOKBACK
        )));
    }
    let chain = chained_soc(series, params, sens, opts)?;
    let starts: Vec<usize> = (FEATURE_LOOKBACK..=series.len() - horizon).step_by(stride).collect();
    exec::map(&starts, |&t| -> Result<Sample> {
        let prices = &series.rtp[t..t + horizon];
        let e_prev = chain[t];
        let sol = hindsight(prices, params, sens, e_prev, opts)?;
        Ok(Sample {
            interval: t,
            x: FeatureWindow {
                x: feature_window(series, t)?,
                target: prices.to_vec(),
            },
            label_p: sol.p,
            label_b: sol.b,
            label_e_prev: e_prev,
            actual_prices: prices.to_vec(),
        })
    })
    .into_iter()
    .collect()
}
