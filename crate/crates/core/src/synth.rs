//! Seeded synthetic market data: a daily price shape with Gaussian noise
//! and occasional spikes, plus matching day-ahead and load channels.

use chrono::{NaiveDate, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::PriceSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub days: usize,
    pub intervals_per_day: usize,
    pub seed: u64,
    /// Mean price ($/MWh).
    pub base: f64,
    /// Amplitude of the daily cycle.
    pub amplitude: f64,
    /// Standard deviation of real-time noise.
    pub noise: f64,
    /// Per-interval probability of a spike.
    pub spike_prob: f64,
    /// Mean spike height above the regular price.
    pub spike_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            days: 120,
            intervals_per_day: 24,
            seed: 0,
            base: 40.0,
            amplitude: 15.0,
            noise: 4.0,
            spike_prob: 0.02,
            spike_scale: 60.0,
        }
    }
}

/// Smooth daily profile in units of the amplitude: a morning and a larger
/// evening peak above a night trough.
fn daily_shape(hour: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    -(tau * hour / 24.0).cos() * 0.6 + 0.4 * (-((hour - 8.0) / 2.0).powi(2)).exp() + 0.8 * (-((hour - 18.5) / 2.0).powi(2)).exp()
        - 0.3
}

pub fn generate(cfg: &SynthConfig) -> Result<PriceSeries> {
    if cfg.days == 0 || cfg.intervals_per_day == 0 || 86_400 % cfg.intervals_per_day != 0 {
        return Err(Error::invalid("synthetic series needs days > 0 and intervals_per_day dividing a day"));
    }
    if !(cfg.noise >= 0.0 && (0.0..=1.0).contains(&cfg.spike_prob) && cfg.spike_scale >= 0.0) {
        return Err(Error::invalid("noise, spike probability or spike scale out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rt_noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).unwrap();
    let step = TimeDelta::seconds(86_400 / cfg.intervals_per_day as i64);
    let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let n = cfg.days * cfg.intervals_per_day;
    let (mut ts, mut rtp, mut dap, mut load) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut level = 0.0;
    for d in 0..cfg.days {
        // slowly varying day level shared by all channels
        level = 0.7 * level + 0.3 * unit.sample(&mut rng) * cfg.amplitude * 0.3;
        let weekend = d % 7 >= 5;
        for i in 0..cfg.intervals_per_day {
            let k = d * cfg.intervals_per_day + i;
            let hour = 24.0 * i as f64 / cfg.intervals_per_day as f64;
            let shape = daily_shape(hour) * if weekend { 0.7 } else { 1.0 };
            let expected = cfg.base + level + cfg.amplitude * shape;
            let mut price = expected + rt_noise.sample(&mut rng);
            if rng.random::<f64>() < cfg.spike_prob {
                price += cfg.spike_scale * (0.5 + rng.random::<f64>());
            }
            ts.push(start + step * k as i32);
            rtp.push(price);
            dap.push(expected + 0.3 * rt_noise.sample(&mut rng));
            load.push(1000.0 + 300.0 * shape + 20.0 * unit.sample(&mut rng));
        }
    }
    PriceSeries::new(ts, rtp, Some(dap), Some(load))
}
