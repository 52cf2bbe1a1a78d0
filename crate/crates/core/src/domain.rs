//! Core value types shared by every stage of the pipeline.
//!
//! All power and energy quantities are per interval: a power rating of 0.5 MW
//! at hourly resolution is stored as 0.5 MWh per interval.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and economic description of a storage asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageParams {
    /// Per-interval charge and discharge limit (MWh per interval).
    pub power_rating: f64,
    /// Energy capacity (MWh).
    pub capacity: f64,
    /// One-way efficiency in (0, 1].
    pub efficiency: f64,
    /// Linear discharge cost ($/MWh).
    pub cost_linear: f64,
    /// Quadratic discharge cost ($/MWh²).
    pub cost_quadratic: f64,
    /// Number of bid segments and state-of-charge levels.
    pub num_segments: usize,
    /// State of charge before the first interval (MWh).
    pub initial_soc: f64,
}

impl Default for StorageParams {
    fn default() -> Self {
        Self {
            power_rating: 0.5,
            capacity: 1.0,
            efficiency: 0.9,
            cost_linear: 10.0,
            cost_quadratic: 0.0,
            num_segments: 10,
            initial_soc: 0.5,
        }
    }
}

impl StorageParams {
    pub fn validate(self) -> Result<Self> {
        validate_storage_params(self)
    }

    /// Quantity of each bid segment, `R / N`.
    pub fn segment_quantity(&self) -> f64 {
        self.power_rating / self.num_segments as f64
    }

    /// Operating cost `c(p, b) = C1 p + C2 p²`; charging is free.
    pub fn cost(&self, p: f64, _b: f64) -> f64 {
        self.cost_linear * p + self.cost_quadratic * p * p
    }

    /// ∂c/∂p at discharge level `p`.
    pub fn marginal_discharge_cost(&self, p: f64) -> f64 {
        self.cost_linear + 2.0 * self.cost_quadratic * p
    }

    /// SoC after one interval of discharge `p` and charge `b` from `e_prev`.
    pub fn next_soc(&self, e_prev: f64, p: f64, b: f64) -> f64 {
        e_prev - p / self.efficiency + b * self.efficiency
    }
}

pub fn validate_storage_params(p: StorageParams) -> Result<StorageParams> {
    let finite = [
        p.power_rating,
        p.capacity,
        p.efficiency,
        p.cost_linear,
        p.cost_quadratic,
        p.initial_soc,
    ]
    .iter()
    .all(|v| v.is_finite());
    if !finite {
        return Err(Error::invalid("storage parameters must be finite"));
    }
    if !(p.efficiency > 0.0 && p.efficiency <= 1.0) {
        return Err(Error::invalid("efficiency out of range"));
    }
    if p.power_rating <= 0.0 {
        return Err(Error::invalid("power rating must be positive"));
    }
    if p.capacity <= 0.0 {
        return Err(Error::invalid("capacity must be positive"));
    }
    if p.initial_soc < 0.0 || p.initial_soc > p.capacity {
        return Err(Error::invalid("initial soc out of range"));
    }
    if p.cost_linear < 0.0 {
        return Err(Error::invalid("linear cost must be nonnegative"));
    }
    if p.cost_quadratic < 0.0 {
        return Err(Error::invalid("quadratic cost must be nonnegative"));
    }
    if p.num_segments == 0 {
        return Err(Error::invalid("num segments must be at least 1"));
    }
    Ok(p)
}

/// Midpoints `(j - 1/2) E / N` of the N equal capacity slices, ascending.
pub fn soc_grid(params: &StorageParams) -> Vec<f64> {
    let n = params.num_segments;
    let width = params.capacity / n as f64;
    (0..n).map(|j| (j as f64 + 0.5) * width).collect()
}

/// Kind of price response to the storage's own net output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityKind {
    #[default]
    PriceTaker,
    Linear,
    Cubic,
}

/// Price impact `f(y)` of net discharge `y = p - b`; the cleared price is `λ - f(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SensitivityModel {
    pub kind: SensitivityKind,
    #[serde(default)]
    pub alpha: f64,
}

impl SensitivityModel {
    pub const PRICE_TAKER: SensitivityModel = SensitivityModel {
        kind: SensitivityKind::PriceTaker,
        alpha: 0.0,
    };

    pub fn linear(alpha: f64) -> Self {
        Self {
            kind: SensitivityKind::Linear,
            alpha,
        }
    }

    pub fn cubic(alpha: f64) -> Self {
        Self {
            kind: SensitivityKind::Cubic,
            alpha,
        }
    }

    pub fn validate(self) -> Result<Self> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::invalid("sensitivity alpha must be finite and nonnegative"));
        }
        Ok(self)
    }

    /// True when the model has no effect on price.
    pub fn is_price_taker(&self) -> bool {
        self.kind == SensitivityKind::PriceTaker || self.alpha == 0.0
    }

    pub fn impact(&self, y: f64) -> f64 {
        match self.kind {
            SensitivityKind::PriceTaker => 0.0,
            SensitivityKind::Linear => self.alpha * y,
            SensitivityKind::Cubic => self.alpha * y * y * y,
        }
    }

    /// f'(y).
    pub fn impact_slope(&self, y: f64) -> f64 {
        match self.kind {
            SensitivityKind::PriceTaker => 0.0,
            SensitivityKind::Linear => self.alpha,
            SensitivityKind::Cubic => 3.0 * self.alpha * y * y,
        }
    }

    pub fn realized_price(&self, lambda: f64, y: f64) -> f64 {
        lambda - self.impact(y)
    }

    /// Market revenue `(λ - f(y)) y`.
    pub fn revenue(&self, lambda: f64, y: f64) -> f64 {
        (lambda - self.impact(y)) * y
    }

    /// Derivative of `f(y) y` with respect to `y`.
    pub(crate) fn impact_cost_slope(&self, y: f64) -> f64 {
        match self.kind {
            SensitivityKind::PriceTaker => 0.0,
            SensitivityKind::Linear => 2.0 * self.alpha * y,
            SensitivityKind::Cubic => 4.0 * self.alpha * y * y * y,
        }
    }

    /// Inverse of [`Self::impact_cost_slope`]; requires `alpha > 0`.
    pub(crate) fn impact_cost_slope_inverse(&self, slope: f64) -> f64 {
        match self.kind {
            SensitivityKind::PriceTaker => 0.0,
            SensitivityKind::Linear => slope / (2.0 * self.alpha),
            SensitivityKind::Cubic => (slope / (4.0 * self.alpha)).cbrt(),
        }
    }
}

/// Time-indexed market data at a fixed resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub rtp: Vec<f64>,
    pub dap: Option<Vec<f64>>,
    pub load: Option<Vec<f64>>,
}

const TIMESTAMP_FORMATS: [&str; 3] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"];

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.naive_utc());
    }
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
}

fn parse_value(raw: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Data {
        row,
        message: format!("{column} value {raw:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Data {
            row,
            message: format!("{column} value is not finite"),
        });
    }
    Ok(v)
}

impl PriceSeries {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        rtp: Vec<f64>,
        dap: Option<Vec<f64>>,
        load: Option<Vec<f64>>,
    ) -> Result<Self> {
        let s = Self {
            timestamps,
            rtp,
            dap,
            load,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.rtp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtp.is_empty()
    }

    pub fn step(&self) -> Option<TimeDelta> {
        match self.timestamps.as_slice() {
            [a, b, ..] => Some(*b - *a),
            _ => None,
        }
    }

    /// Number of intervals in 24 hours at this resolution (24 if unknown).
    pub fn intervals_per_day(&self) -> usize {
        match self.step() {
            Some(step) if step.num_seconds() > 0 => (86_400 / step.num_seconds()).max(1) as usize,
            _ => 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rtp.len();
        if self.timestamps.len() != n {
            return Err(Error::shape("timestamps and rtp differ in length"));
        }
        for (name, col) in [("dap", &self.dap), ("load", &self.load)] {
            if let Some(c) = col {
                if c.len() != n {
                    return Err(Error::shape(format!("{name} and rtp differ in length")));
                }
            }
        }
        if let Some((i, _)) = self.rtp.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data {
                row: i + 1,
                message: "rtp value is not finite".into(),
            });
        }
        if n >= 2 {
            let step = self.timestamps[1] - self.timestamps[0];
            if step <= TimeDelta::zero() {
                return Err(Error::Data {
                    row: 2,
                    message: "timestamps not strictly increasing".into(),
                });
            }
            for i in 2..n {
                let d = self.timestamps[i] - self.timestamps[i - 1];
                if d != step {
                    return Err(Error::Data {
                        row: i + 1,
                        message: format!(
                            "timestamp gap: expected step {}s, found {}s",
                            step.num_seconds(),
                            d.num_seconds()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Parses CSV with header `timestamp,rtp[,dap][,load]`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
        let ts_col = col("timestamp").ok_or_else(|| Error::Data {
            row: 0,
            message: "missing timestamp column".into(),
        })?;
        let rtp_col = col("rtp").ok_or_else(|| Error::Data {
            row: 0,
            message: "missing rtp column".into(),
        })?;
        let dap_col = col("dap");
        let load_col = col("load");

        let mut timestamps = Vec::new();
        let mut rtp = Vec::new();
        let mut dap = dap_col.map(|_| Vec::new());
        let mut load = load_col.map(|_| Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let ts = parse_timestamp(field(ts_col)).ok_or_else(|| Error::Data {
                row,
                message: format!("unparseable timestamp {:?}", field(ts_col)),
            })?;
            if let Some(prev) = timestamps.last() {
                if ts <= *prev {
                    return Err(Error::Data {
                        row,
                        message: "timestamps not strictly increasing".into(),
                    });
                }
            }
            timestamps.push(ts);
            rtp.push(parse_value(field(rtp_col), row, "rtp")?);
            if let (Some(c), Some(v)) = (dap_col, dap.as_mut()) {
                v.push(parse_value(field(c), row, "dap")?);
            }
            if let (Some(c), Some(v)) = (load_col, load.as_mut()) {
                v.push(parse_value(field(c), row, "load")?);
            }
        }
        Self::new(timestamps, rtp, dap, load)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the canonical CSV layout; absent optional channels are omitted.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp", "rtp"];
        if self.dap.is_some() {
            header.push("dap");
        }
        if self.load.is_some() {
            header.push("load");
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                self.timestamps[i].format("%Y-%m-%dT%H:%M:%S").to_string(),
                self.rtp[i].to_string(),
            ];
            for c in [&self.dap, &self.load].into_iter().flatten() {
                rec.push(c[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Sub-series over `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let cut = |c: &Option<Vec<f64>>| c.as_ref().map(|v| v[range.clone()].to_vec());
        Self {
            timestamps: self.timestamps[range.clone()].to_vec(),
            rtp: self.rtp[range.clone()].to_vec(),
            dap: cut(&self.dap),
            load: cut(&self.load),
        }
    }

    /// Enabled channels in feature order: rtp, then dap and load when present.
    pub fn channels(&self) -> Vec<&[f64]> {
        let mut out = vec![self.rtp.as_slice()];
        if let Some(d) = &self.dap {
            out.push(d);
        }
        if let Some(l) = &self.load {
            out.push(l);
        }
        out
    }
}

/// Number of trailing intervals in every feature window.
pub const FEATURE_LOOKBACK: usize = 24;

/// Predictor input and forward price target for one decision interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    /// Channel-major trailing window: all rtp values, then dap, then load.
    pub x: Vec<f64>,
    /// Forward rtp over the horizon, starting at the decision interval.
    pub target: Vec<f64>,
}

/// Primal trajectory and every dual of the horizon arbitrage program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbSolution {
    pub p: Vec<f64>,
    pub b: Vec<f64>,
    pub e: Vec<f64>,
    /// Dual of each SoC transition; `theta[0]` is the marginal value of the initial SoC.
    pub theta: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub v_lo: Vec<f64>,
    pub v_hi: Vec<f64>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl ArbSolution {
    pub fn empty() -> Self {
        Self {
            p: vec![],
            b: vec![],
            e: vec![],
            theta: vec![],
            u_lo: vec![],
            u_hi: vec![],
            v_lo: vec![],
            v_hi: vec![],
            w_lo: vec![],
            w_hi: vec![],
            objective: 0.0,
            iterations: 0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.p.len()
    }
}

/// Segmented discharge (supply) and charge (demand) offers for one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidCurve {
    pub soc_levels: Vec<f64>,
    #[serde(rename = "S")]
    pub discharge_prices: Vec<f64>,
    #[serde(rename = "D")]
    pub charge_prices: Vec<f64>,
    #[serde(rename = "seg_qty")]
    pub segment_quantity: Vec<f64>,
}

impl BidCurve {
    pub fn num_segments(&self) -> usize {
        self.discharge_prices.len()
    }

    /// True when discharge prices are non-increasing along ascending SoC levels,
    /// i.e. the supply curve rises with cumulative discharge.
    pub fn is_monotone(&self) -> bool {
        self.discharge_prices.windows(2).all(|w| w[0] >= w[1])
            && self.charge_prices.windows(2).all(|w| w[0] >= w[1])
    }

    /// Restores monotone order by sorting both curves descending (stable).
    pub fn sort_segments(&mut self) {
        let sort_desc = |v: &mut Vec<f64>| v.sort_by(|a, b| b.total_cmp(a));
        sort_desc(&mut self.discharge_prices);
        sort_desc(&mut self.charge_prices);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.discharge_prices.len();
        if self.charge_prices.len() != n || self.segment_quantity.len() != n || self.soc_levels.len() != n {
            return Err(Error::shape("bid curve fields differ in length"));
        }
        if self.segment_quantity.iter().any(|q| !(*q > 0.0)) {
            return Err(Error::invalid("segment quantities must be positive"));
        }
        if self.soc_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("soc levels must be strictly increasing"));
        }
        Ok(())
    }
}

/// One training example: features, hindsight labels and realized prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Index of the decision interval in the source series.
    pub interval: usize,
    pub x: FeatureWindow,
    pub label_p: Vec<f64>,
    pub label_b: Vec<f64>,
    /// SoC entering the decision interval along the hindsight trajectory.
    pub label_e_prev: f64,
    pub actual_prices: Vec<f64>,
}
