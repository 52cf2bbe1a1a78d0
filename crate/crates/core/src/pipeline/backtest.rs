//! Rolling-horizon backtest of a bidding policy and report comparison.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::arbitrage::{solve_arbitrage_with, ArbProblem, IpmOptions};
use crate::bids::{anchored_levels, ensure_monotone, form_bids_split, theta_at_levels};
use crate::clearing::{clear, interval_profit};
use crate::domain::{BidCurve, PriceSeries, SensitivityModel, StorageParams, FEATURE_LOOKBACK};
use crate::error::{Error, Result};
use crate::predictor::PricePredictor;

use super::dataset::feature_window;

/// Source of price forecasts over `[t, t + horizon)`.
pub trait Forecaster {
    /// Intervals of history required before the first decision.
    fn history(&self) -> usize;
    fn forecast(&self, series: &PriceSeries, t: usize, horizon: usize) -> Result<Vec<f64>>;
}

impl Forecaster for PricePredictor {
    fn history(&self) -> usize {
        FEATURE_LOOKBACK
    }

    fn forecast(&self, series: &PriceSeries, t: usize, horizon: usize) -> Result<Vec<f64>> {
        let mut out = self.predict_raw(&feature_window(series, t)?)?;
        out.truncate(horizon);
        Ok(out)
    }
}

/// Actual future prices, cut at the end of the series.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectForesight;

impl Forecaster for PerfectForesight {
    fn history(&self) -> usize {
        0
    }

    fn forecast(&self, series: &PriceSeries, t: usize, horizon: usize) -> Result<Vec<f64>> {
        Ok(series.rtp[t..(t + horizon).min(series.len())].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Df,
    ThreeStage,
    PerfectForesight,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "df" => Ok(Self::Df),
            "three_stage" => Ok(Self::ThreeStage),
            "perfect_foresight" => Ok(Self::PerfectForesight),
            other => Err(Error::invalid(format!("unknown backtest mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub horizon: usize,
    /// First decision interval; defaults to the forecaster's history.
    pub start: Option<usize>,
    /// One past the last decision interval; defaults to the series end.
    pub end: Option<usize>,
    pub mode: Mode,
    /// Solver options for bids and the hindsight reference.
    #[serde(skip)]
    pub solver: IpmOptions,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            horizon: 24,
            start: None,
            end: None,
            mode: Mode::Df,
            solver: IpmOptions::default(),
        }
    }
}

/// Bids for the decision interval from a forecast starting at that interval,
/// with segments valued at levels anchored on the current SoC `e` over the
/// rest of the horizon.
pub fn bid_from_forecast(forecast: &[f64], e: f64, params: &StorageParams) -> Result<(BidCurve, bool)> {
    bid_from_forecast_with(forecast, e, params, &IpmOptions::default())
}

pub fn bid_from_forecast_with(forecast: &[f64], e: f64, params: &StorageParams, opts: &IpmOptions) -> Result<(BidCurve, bool)> {
    let rest = forecast.get(1..).unwrap_or(&[]);
    let (ld, lc) = anchored_levels(e, params);
    let n = ld.len();
    let all: Vec<f64> = ld.into_iter().chain(lc).collect();
    let theta = theta_at_levels(rest, params, &all, opts)?;
    let mut bid = form_bids_split(&theta[..n], &theta[n..], params);
    let sorted = ensure_monotone(&mut bid);
    Ok((bid, sorted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestRow {
    pub t: usize,
    pub p: f64,
    pub b: f64,
    /// SoC after the interval.
    pub soc: f64,
    /// Realized clearing price.
    pub price: f64,
    /// Cumulative settled profit through this interval.
    pub profit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub mode: Mode,
    pub sensitivity: SensitivityModel,
    pub horizon: usize,
    /// Bids are recomputed every interval of the data resolution.
    pub resolution: String,
    pub start: usize,
    pub end: usize,
    pub final_profit: f64,
    pub discharge_intervals: usize,
    pub charge_intervals: usize,
    pub idle_intervals: usize,
    pub energy_discharged: f64,
    pub energy_charged: f64,
    /// Bid curves that needed re-sorting into merit order.
    pub reordered_bids: usize,
    /// Degenerate training samples of the weights used, when known.
    pub degenerate_samples: Option<usize>,
    /// Price-taker hindsight optimum over the same span from the same SoC.
    pub hindsight_profit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub rows: Vec<BacktestRow>,
    pub summary: BacktestSummary,
}

const DISPATCH_EPS: f64 = 1e-9;

pub fn backtest(
    series: &PriceSeries,
    forecaster: &dyn Forecaster,
    params: &StorageParams,
    sens: &SensitivityModel,
    cfg: &BacktestConfig,
) -> Result<BacktestReport> {
    series.validate()?;
    params.validate()?;
    sens.validate()?;
    if cfg.horizon == 0 {
        return Err(Error::invalid("horizon must be positive"));
    }
    let start = cfg.start.unwrap_or(forecaster.history());
    let end = cfg.end.unwrap_or(series.len()).min(series.len());
    if start < forecaster.history() || start >= end {
        return Err(Error::invalid(format!(
            "backtest span {start}..{end} is empty or lacks {} intervals of history",
            forecaster.history()
        )));
    }
    let mut soc = params.initial_soc;
    let mut cum = 0.0;
    let mut rows = Vec::with_capacity(end - start);
    let mut summary = BacktestSummary {
        mode: cfg.mode,
        sensitivity: *sens,
        horizon: cfg.horizon,
        resolution: "interval-native".into(),
        start,
        end,
        final_profit: 0.0,
        discharge_intervals: 0,
        charge_intervals: 0,
        idle_intervals: 0,
        energy_discharged: 0.0,
        energy_charged: 0.0,
        reordered_bids: 0,
        degenerate_samples: None,
        hindsight_profit: None,
    };
    for t in start..end {
        let forecast = forecaster.forecast(series, t, cfg.horizon)?;
        let (bid, sorted) = bid_from_forecast_with(&forecast, soc, params, &cfg.solver)?;
        summary.reordered_bids += sorted as usize;
        let r = clear(&bid, series.rtp[t], sens, soc, params)?;
        if !(-1e-9..=params.capacity + 1e-9).contains(&r.soc_after) {
            return Err(Error::Internal(format!("soc {} left [0, E] at interval {t}", r.soc_after)));
        }
        soc = r.soc_after;
        cum += interval_profit(&r, params);
        if r.p_total > DISPATCH_EPS {
            summary.discharge_intervals += 1;
        }
        if r.b_total > DISPATCH_EPS {
            summary.charge_intervals += 1;
        }
        if r.p_total <= DISPATCH_EPS && r.b_total <= DISPATCH_EPS {
            summary.idle_intervals += 1;
        }
        summary.energy_discharged += r.p_total;
        summary.energy_charged += r.b_total;
        rows.push(BacktestRow {
            t,
            p: r.p_total,
            b: r.b_total,
            soc,
            price: r.realized_price,
            profit: cum,
        });
    }
    summary.final_profit = cum;
    if sens.is_price_taker() {
        let prob = ArbProblem::price_taker(&series.rtp[start..end], params, params.initial_soc);
        summary.hindsight_profit = Some(solve_arbitrage_with(&prob, &cfg.solver)?.objective);
    }
    Ok(BacktestReport { rows, summary })
}

impl BacktestReport {
    pub fn final_profit(&self) -> f64 {
        self.summary.final_profit
    }

    /// `t,p,b,soc,price,profit` with cumulative profit.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.summary)?;
        Ok(())
    }

    pub fn read(csv_reader: impl std::io::Read, summary: impl std::io::Read) -> Result<Self> {
        let rows = csv::Reader::from_reader(csv_reader)
            .deserialize()
            .collect::<std::result::Result<Vec<BacktestRow>, _>>()?;
        Ok(Self {
            rows,
            summary: serde_json::from_reader(summary)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub final_a: f64,
    pub final_b: f64,
    pub delta: f64,
    /// `(a − b)/|b|` in percent; absent when `b` is zero.
    pub pct: Option<f64>,
    #[serde(skip)]
    pub curve: Vec<(usize, f64, f64)>,
}

pub fn compare_reports(a: &BacktestReport, b: &BacktestReport) -> Result<Comparison> {
    if a.rows.len() != b.rows.len() || a.rows.iter().zip(&b.rows).any(|(x, y)| x.t != y.t) {
        return Err(Error::shape(format!(
            "reports cover different intervals ({} vs {} rows)",
            a.rows.len(),
            b.rows.len()
        )));
    }
    let (fa, fb) = (a.final_profit(), b.final_profit());
    Ok(Comparison {
        final_a: fa,
        final_b: fb,
        delta: fa - fb,
        pct: (fb != 0.0).then(|| (fa - fb) / fb.abs() * 100.0),
        curve: a.rows.iter().zip(&b.rows).map(|(x, y)| (x.t, x.profit, y.profit)).collect(),
    })
}

impl Comparison {
    /// `t,cumprofit_a,cumprofit_b`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "cumprofit_a", "cumprofit_b"])?;
        for (t, a, b) in &self.curve {
            out.write_record([t.to_string(), a.to_string(), b.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(profits: &[f64]) -> BacktestReport {
        let rows = profits
            .iter()
            .enumerate()
            .map(|(t, &profit)| BacktestRow { t, p: 0.0, b: 0.0, soc: 0.5, price: 0.0, profit })
            .collect();
        BacktestReport {
            rows,
            summary: BacktestSummary {
                mode: Mode::Df,
                sensitivity: SensitivityModel::PRICE_TAKER,
                horizon: 24,
                resolution: "interval-native".into(),
                start: 0,
                end: profits.len(),
                final_profit: *profits.last().unwrap(),
                discharge_intervals: 0,
                charge_intervals: 0,
                idle_intervals: profits.len(),
                energy_discharged: 0.0,
                energy_charged: 0.0,
                reordered_bids: 0,
                degenerate_samples: None,
                hindsight_profit: None,
            },
        }
    }

    #[test]
    fn identical_reports_have_zero_delta() {
        let a = report(&[1.0, 5.0]);
        let c = compare_reports(&a, &a).unwrap();
        assert_eq!(c.delta, 0.0);
        assert_eq!(c.pct, Some(0.0));
    }

    #[test]
    fn percentage_improvement() {
        let c = compare_reports(&report(&[50.0, 121.0]), &report(&[40.0, 100.0])).unwrap();
        assert!((c.pct.unwrap() - 21.0).abs() < 1e-12);
        let mut buf = vec![];
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,cumprofit_a,cumprofit_b\n0,50,40\n"));
    }

    #[test]
    fn mismatched_horizons_are_rejected() {
        assert!(compare_reports(&report(&[1.0]), &report(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("three_stage".parse::<Mode>().unwrap(), Mode::ThreeStage);
        assert!("x".parse::<Mode>().is_err());
    }
}
