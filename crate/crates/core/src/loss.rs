//! Perturbed Fenchel-Young loss on the first interval of a sample.
//!
//! With bids `S̃, D̃` built from `θ + εZ`, the loss is the expected optimal
//! clearing objective minus the objective of the hindsight dispatch under
//! the unperturbed bids. Its gradient in `θ_j` is the gap between the label's
//! and the expected cleared SoC drawdown of segment `j`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bids::form_bids_split;
use crate::clearing::clear;
use crate::domain::{BidCurve, Sample, SensitivityModel, StorageParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Noise scale on θ ($/MWh).
    pub epsilon: f64,
    /// Monte-Carlo draws per evaluation.
    pub samples: usize,
    pub seed: u64,
    /// Market response used in clearing; price taker by default.
    pub sensitivity: SensitivityModel,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            samples: 1,
            seed: 0,
            sensitivity: SensitivityModel::PRICE_TAKER,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("monte carlo sample count must be at least 1"));
        }
        self.sensitivity.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `K × N` standard-normal draws from the configured seed.
pub fn draw_noise(cfg: &LossConfig, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.samples)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Distributes a total over segments in merit order of `price` (ascending
/// when `ascending`), earlier segments first on ties.
fn merit_split(total: f64, bid: &BidCurve, price: &[f64], ascending: bool) -> Vec<f64> {
    let n = bid.num_segments();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let c = price[a].total_cmp(&price[b]);
        if ascending {
            c
        } else {
            c.reverse()
        }
    });
    let mut left = total.max(0.0);
    let mut out = vec![0.0; n];
    for j in order {
        let take = left.min(bid.segment_quantity[j]);
        out[j] = take;
        left -= take;
    }
    out
}

/// Per-segment split of the label dispatch: discharge fills the cheapest
/// offers first, charge the highest bids first.
pub fn label_segments(p_total: f64, b_total: f64, bid: &BidCurve) -> (Vec<f64>, Vec<f64>) {
    (
        merit_split(p_total, bid, &bid.discharge_prices, true),
        merit_split(b_total, bid, &bid.charge_prices, false),
    )
}

/// Monte-Carlo loss and gradient with noise drawn from `cfg.seed`. Each
/// `θ_j` prices both the discharge and the charge offer of segment `j`.
pub fn perturbed_loss_and_grad(
    theta: &[f64],
    sample: &Sample,
    params: &StorageParams,
    cfg: &LossConfig,
) -> Result<LossEval> {
    cfg.validate()?;
    let noise = draw_noise(cfg, theta.len());
    perturbed_loss_and_grad_with_noise(theta, sample, params, cfg.epsilon, &cfg.sensitivity, &noise)
}

/// As [`perturbed_loss_and_grad`] with explicit noise draws, for common
/// random numbers across evaluations.
pub fn perturbed_loss_and_grad_with_noise(
    theta: &[f64],
    sample: &Sample,
    params: &StorageParams,
    epsilon: f64,
    sensitivity: &SensitivityModel,
    noise: &[Vec<f64>],
) -> Result<LossEval> {
    let n = theta.len();
    if noise.iter().any(|z| z.len() != n) {
        return Err(Error::shape(format!("noise must be K × {n}")));
    }
    let doubled: Vec<Vec<f64>> = noise.iter().map(|z| [z.as_slice(), z.as_slice()].concat()).collect();
    let ev = split_loss_and_grad(theta, theta, sample, params, epsilon, sensitivity, &doubled)?;
    Ok(LossEval {
        loss: ev.loss,
        grad: (0..n).map(|j| ev.grad[j] + ev.grad[n + j]).collect(),
    })
}

/// Loss and gradient for bids whose discharge offers are priced from
/// `theta_discharge` and charge bids from `theta_charge`, perturbed
/// independently. The gradient is `[dL/dθ_discharge; dL/dθ_charge]`.
pub fn perturbed_loss_and_grad_split(
    theta_discharge: &[f64],
    theta_charge: &[f64],
    sample: &Sample,
    params: &StorageParams,
    cfg: &LossConfig,
) -> Result<LossEval> {
    cfg.validate()?;
    let noise = draw_noise(cfg, theta_discharge.len() + theta_charge.len());
    split_loss_and_grad(theta_discharge, theta_charge, sample, params, cfg.epsilon, &cfg.sensitivity, &noise)
}

/// Split loss with explicit `K × 2N` noise: discharge columns first.
pub fn split_loss_and_grad(
    theta_discharge: &[f64],
    theta_charge: &[f64],
    sample: &Sample,
    params: &StorageParams,
    epsilon: f64,
    sensitivity: &SensitivityModel,
    noise: &[Vec<f64>],
) -> Result<LossEval> {
    let n = theta_discharge.len();
    if theta_charge.len() != n {
        return Err(Error::shape("discharge and charge duals differ in length"));
    }
    if noise.is_empty() || noise.iter().any(|z| z.len() != 2 * n) {
        return Err(Error::shape(format!("noise must be K × {} with K ≥ 1", 2 * n)));
    }
    let (Some(&lambda), Some(&lp), Some(&lb)) =
        (sample.actual_prices.first(), sample.label_p.first(), sample.label_b.first())
    else {
        return Err(Error::shape("sample has an empty horizon"));
    };
    let eta = params.efficiency;
    let e_prev = sample.label_e_prev.clamp(0.0, params.capacity);

    let base = form_bids_split(theta_discharge, theta_charge, params);
    let (p_bar, b_bar) = label_segments(lp.clamp(0.0, params.power_rating), lb.clamp(0.0, params.power_rating), &base);
    let y_bar: f64 = p_bar.iter().sum::<f64>() - b_bar.iter().sum::<f64>();
    let hindsight = sensitivity.revenue(lambda, y_bar)
        - (0..n)
            .map(|j| base.discharge_prices[j] * p_bar[j] - base.charge_prices[j] * b_bar[j])
            .sum::<f64>();

    let mut mean_obj = 0.0;
    let mut mean_p = vec![0.0; n];
    let mut mean_b = vec![0.0; n];
    let shift = |theta: &[f64], z: &[f64]| -> Vec<f64> { theta.iter().zip(z).map(|(t, z)| t + epsilon * z).collect() };
    for z in noise {
        let bid = form_bids_split(&shift(theta_discharge, &z[..n]), &shift(theta_charge, &z[n..]), params);
        let r = clear(&bid, lambda, sensitivity, e_prev, params)?;
        mean_obj += r.objective;
        for j in 0..n {
            mean_p[j] += r.p_seg[j];
            mean_b[j] += r.b_seg[j];
        }
    }
    let k = noise.len() as f64;
    mean_obj /= k;
    let grad = (0..n)
        .map(|j| (p_bar[j] - mean_p[j] / k) / eta)
        .chain((0..n).map(|j| -(b_bar[j] - mean_b[j] / k) * eta))
        .collect();
    Ok(LossEval {
        loss: mean_obj - hindsight,
        grad,
    })
}

/// `dL/dθ · dθ/dλ̂ · dλ̂/dw`.
pub fn chain_gradient(dl_dtheta: &[f64], dtheta_dlambda: &DMatrix<f64>, dlambda_dw: &DMatrix<f64>) -> Result<Vec<f64>> {
    if dtheta_dlambda.nrows() != dl_dtheta.len() || dtheta_dlambda.ncols() != dlambda_dw.nrows() {
        return Err(Error::shape(format!(
            "cannot chain 1×{} · {}×{} · {}×{}",
            dl_dtheta.len(),
            dtheta_dlambda.nrows(),
            dtheta_dlambda.ncols(),
            dlambda_dw.nrows(),
            dlambda_dw.ncols()
        )));
    }
    let up = price_upstream(dl_dtheta, dtheta_dlambda)?;
    let g = DMatrix::from_row_slice(1, up.len(), &up) * dlambda_dw;
    Ok(g.iter().copied().collect())
}

/// `dL/dλ̂ = (dL/dθ)ᵀ dθ/dλ̂`, the upstream vector of a predictor VJP.
pub fn price_upstream(dl_dtheta: &[f64], dtheta_dlambda: &DMatrix<f64>) -> Result<Vec<f64>> {
    if dtheta_dlambda.nrows() != dl_dtheta.len() {
        return Err(Error::shape("gradient and jacobian row counts differ"));
    }
    Ok((0..dtheta_dlambda.ncols())
        .map(|c| (0..dl_dtheta.len()).map(|j| dl_dtheta[j] * dtheta_dlambda[(j, c)]).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::FeatureWindow;

    fn params() -> StorageParams {
        StorageParams {
            num_segments: 2,
            ..StorageParams::default()
        }
    }

    fn sample(lambda: f64, p: f64, b: f64, e_prev: f64) -> Sample {
        Sample {
            interval: 0,
            x: FeatureWindow { x: vec![], target: vec![lambda] },
            label_p: vec![p],
            label_b: vec![b],
            label_e_prev: e_prev,
            actual_prices: vec![lambda],
        }
    }

    #[test]
    fn full_discharge_label_against_idle_clearing() {
        // huge θ keeps every discharge offer far above the price
        let s = sample(50.0, 0.5, 0.0, 1.0);
        let p = params();
        let noise = vec![vec![0.0, 0.0]];
        let pm = SensitivityModel::PRICE_TAKER;
        let ev = perturbed_loss_and_grad_with_noise(&[1000.0, 1000.0], &s, &p, 1.0, &pm, &noise).unwrap();
        for g in ev.grad {
            assert!((g - 0.25 / 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn reproduced_label_has_zero_gradient() {
        let s = sample(50.0, 0.5, 0.0, 1.0);
        let p = params();
        let cfg = LossConfig { samples: 16, seed: 3, ..LossConfig::default() };
        // low θ: every draw discharges both segments, as the label does
        let ev = perturbed_loss_and_grad(&[0.0, 0.0], &s, &p, &cfg).unwrap();
        assert!(ev.grad.iter().all(|g| g.abs() < 1e-12));
        // the residual loss is the sample mean of the offer noise on the dispatched energy
        let noise = draw_noise(&cfg, 2);
        let expect: f64 = -noise.iter().flatten().sum::<f64>() * 0.25 / 0.9 / 16.0;
        assert!((ev.loss - expect).abs() < 1e-9, "{} vs {expect}", ev.loss);
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let s = sample(30.0, 0.0, 0.3, 0.2);
        let cfg = LossConfig { samples: 8, seed: 11, ..LossConfig::default() };
        let a = perturbed_loss_and_grad(&[25.0, 24.0], &s, &params(), &cfg).unwrap();
        let b = perturbed_loss_and_grad(&[25.0, 24.0], &s, &params(), &cfg).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn shared_theta_is_the_sum_of_split_gradients() {
        let s = sample(30.0, 0.0, 0.3, 0.2);
        let p = params();
        let noise = vec![vec![0.4, -1.2], vec![-0.3, 0.9]];
        let th = [31.0, 29.0];
        let pm = SensitivityModel::PRICE_TAKER;
        let shared = perturbed_loss_and_grad_with_noise(&th, &s, &p, 2.0, &pm, &noise).unwrap();
        let doubled: Vec<Vec<f64>> = noise.iter().map(|z| [z.clone(), z.clone()].concat()).collect();
        let split = split_loss_and_grad(&th, &th, &s, &p, 2.0, &pm, &doubled).unwrap();
        assert_eq!(shared.loss, split.loss);
        for j in 0..2 {
            assert!((shared.grad[j] - split.grad[j] - split.grad[2 + j]).abs() < 1e-15);
        }
    }

    #[test]
    fn label_split_follows_merit_order() {
        let bid = crate::bids::form_bids(&[30.0, 20.0, 20.0], &StorageParams { num_segments: 3, ..params() });
        let q = 0.5 / 3.0;
        let (p, b) = label_segments(0.2, 0.2, &bid);
        assert!((p[1] - q).abs() < 1e-12 && (p[2] - (0.2 - q)).abs() < 1e-12 && p[0] == 0.0);
        assert!((b[0] - q).abs() < 1e-12 && (b[1] - (0.2 - q)).abs() < 1e-12 && b[2] == 0.0);
    }

    #[test]
    fn scalar_chain_rule() {
        let g = chain_gradient(
            &[2.0],
            &DMatrix::from_element(1, 1, 3.0),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        assert_eq!(g, vec![24.0]);
        let z = chain_gradient(&[0.0], &DMatrix::from_element(1, 2, 3.0), &DMatrix::from_element(2, 3, 1.0)).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        assert!(chain_gradient(&[1.0], &DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { epsilon: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { samples: 0, ..LossConfig::default() }.validate().is_err());
    }
}
