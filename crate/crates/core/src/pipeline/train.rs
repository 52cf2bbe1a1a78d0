//! Decision-focused training: predict, bid, clear under perturbation and
//! backpropagate through the dual sensitivities into the predictor.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arbitrage::IpmOptions;
use crate::bids::anchored_levels;
use crate::domain::{Sample, StorageParams};
use crate::error::{Error, Result};
use crate::exec;
use crate::kktdiff::theta_jacobian_with;
use crate::loss::{perturbed_loss_and_grad_split, price_upstream, LossConfig};
use crate::predictor::{adam_step, AdamState, Checkpoint, PricePredictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Solver options for the per-sample dual sensitivities.
    #[serde(skip)]
    pub solver: IpmOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 32,
            lr: 1e-4,
            seed: 0,
            solver: IpmOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Samples whose dual sensitivities were degenerate (zero gradient).
    pub degenerate: usize,
    /// Optimizer steps skipped on a non-finite gradient.
    pub skipped_steps: usize,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub predictor: PricePredictor,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub trace: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(predictor: PricePredictor, lr: f64) -> Self {
        let adam = AdamState::new(predictor.weights.len(), lr);
        Self {
            predictor,
            adam,
            epoch: 0,
            trace: vec![],
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.predictor, self.epoch, Some(self.adam.clone()))
    }

    /// Restores a run; a checkpoint without optimizer state starts fresh moments.
    pub fn from_checkpoint(ck: &Checkpoint, lr: f64) -> Result<Self> {
        let predictor = ck.predictor()?;
        let adam = match &ck.adam {
            Some(a) if a.m.len() == predictor.weights.len() => a.clone(),
            Some(_) => return Err(Error::shape("checkpoint optimizer state does not match its weights")),
            None => AdamState::new(predictor.weights.len(), lr),
        };
        Ok(Self {
            predictor,
            adam,
            epoch: ck.epoch,
            trace: vec![],
        })
    }
}

/// Loss, weight gradient and degeneracy flag of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTerm {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub degenerate: bool,
}

/// Discharge and charge duals at SoC-anchored levels with their sensitivity
/// to the forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredDuals {
    pub theta_discharge: Vec<f64>,
    pub theta_charge: Vec<f64>,
    /// `2N × T`: discharge rows first. Bids for the decision interval value
    /// SoC over the rest of the horizon, so column 0 is zero.
    pub jacobian: DMatrix<f64>,
    /// Per-row degeneracy flags, rows zeroed in `jacobian`.
    pub degenerate: Vec<bool>,
}

impl AnchoredDuals {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|d| *d)
    }
}

/// Duals and `dθ/dλ̂` for bids submitted at SoC `e` from `forecast`.
pub fn anchored_duals(forecast: &[f64], e: f64, params: &StorageParams) -> Result<AnchoredDuals> {
    anchored_duals_with(forecast, e, params, &IpmOptions::default())
}

pub fn anchored_duals_with(forecast: &[f64], e: f64, params: &StorageParams, opts: &IpmOptions) -> Result<AnchoredDuals> {
    let (ld, lc) = anchored_levels(e, params);
    let mut distinct: Vec<f64> = ld.iter().chain(&lc).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let rest = forecast.get(1..).unwrap_or(&[]);
    let tj = theta_jacobian_with(rest, params, &distinct, opts)?;
    let n = ld.len();
    let mut out = AnchoredDuals {
        theta_discharge: Vec::with_capacity(n),
        theta_charge: Vec::with_capacity(n),
        jacobian: DMatrix::zeros(2 * n, forecast.len()),
        degenerate: Vec::with_capacity(2 * n),
    };
    for (row, e) in ld.iter().chain(&lc).enumerate() {
        let k = distinct.binary_search_by(|d| d.total_cmp(e)).unwrap();
        if row < n {
            out.theta_discharge.push(tj.theta[k]);
        } else {
            out.theta_charge.push(tj.theta[k]);
        }
        for c in 0..rest.len() {
            out.jacobian[(row, c + 1)] = tj.jacobian[(k, c)];
        }
        out.degenerate.push(tj.degenerate[k]);
    }
    Ok(out)
}

/// Forward pass through predictor, anchored bids and perturbed clearing, and
/// the chain rule back to the weights.
pub fn sample_term(
    predictor: &PricePredictor,
    sample: &Sample,
    params: &StorageParams,
    loss_cfg: &LossConfig,
    opts: &IpmOptions,
) -> Result<SampleTerm> {
    let forecast = predictor.predict(&sample.x)?;
    let duals = anchored_duals_with(&forecast, sample.label_e_prev, params, opts)?;
    let ev = perturbed_loss_and_grad_split(&duals.theta_discharge, &duals.theta_charge, sample, params, loss_cfg)?;
    let degenerate = duals.any_degenerate();
    if degenerate {
        return Ok(SampleTerm {
            loss: ev.loss,
            grad: vec![0.0; predictor.weights.len()],
            degenerate,
        });
    }
    let upstream = price_upstream(&ev.grad, &duals.jacobian)?;
    let grad = predictor.vjp(&sample.x.x, &upstream)?;
    Ok(SampleTerm {
        loss: ev.loss,
        grad,
        degenerate,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise seed of sample `index` in `epoch`.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ index as u64)
}

/// Fresh run of `cfg.epochs` epochs from `predictor`.
pub fn train_decision_focused(
    dataset: &[Sample],
    predictor: PricePredictor,
    params: &StorageParams,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let mut state = TrainState::new(predictor, cfg.lr);
    train_epochs(dataset, &mut state, params, loss_cfg, cfg, cfg.epochs)?;
    Ok(state)
}

/// Continues `state` until `until` epochs are complete, calling nothing
/// between epochs; the result is identical to an uninterrupted run.
pub fn train_epochs(
    dataset: &[Sample],
    state: &mut TrainState,
    params: &StorageParams,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    until: usize,
) -> Result<()> {
    train_epochs_with(dataset, state, params, loss_cfg, cfg, until, |_| Ok(()))
}

/// As [`train_epochs`], invoking `after_epoch` once each epoch completes.
pub fn train_epochs_with(
    dataset: &[Sample],
    state: &mut TrainState,
    params: &StorageParams,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    until: usize,
    mut after_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    cfg.validate()?;
    loss_cfg.validate()?;
    params.validate()?;
    state.adam.lr = cfg.lr;
    while state.epoch < until {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, usize::MAX)));
        let mut stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: 0.0,
            degenerate: 0,
            skipped_steps: 0,
        };
        for batch in order.chunks(cfg.batch) {
            let predictor = &state.predictor;
            let terms = exec::map(batch, |&i| {
                let lc = LossConfig {
                    seed: sample_seed(loss_cfg.seed ^ cfg.seed, epoch, i),
                    ..*loss_cfg
                };
                sample_term(predictor, &dataset[i], params, &lc, &cfg.solver)
            });
            let mut grad = vec![0.0; state.predictor.weights.len()];
            for t in terms {
                let t = t?;
                stats.mean_loss += t.loss;
                stats.degenerate += t.degenerate as usize;
                for (a, b) in grad.iter_mut().zip(&t.grad) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if !adam_step(&mut state.predictor.weights, &grad, &mut state.adam)? {
                stats.skipped_steps += 1;
            }
        }
        stats.mean_loss /= dataset.len() as f64;
        if stats.degenerate > 0 {
            log::info!(
                "epoch {}: {} of {} samples degenerate",
                stats.epoch,
                stats.degenerate,
                dataset.len()
            );
        }
        state.trace.push(stats);
        state.epoch += 1;
        after_epoch(state)?;
    }
    Ok(())
}
