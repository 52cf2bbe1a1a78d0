//! Dataset construction, decision-focused training and backtesting.

mod backtest;
mod dataset;
mod experiment;
mod train;

pub use backtest::{
    backtest, bid_from_forecast, bid_from_forecast_with, compare_reports, BacktestConfig, BacktestReport, BacktestRow, BacktestSummary,
    Comparison, Forecaster, Mode, PerfectForesight,
};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
pub use dataset::{build_dataset, build_dataset_solver, build_dataset_with, day_chained_soc, feature_window};
pub use train::{
    anchored_duals, anchored_duals_with, sample_seed, sample_term, train_decision_focused, train_epochs, train_epochs_with, AnchoredDuals, EpochStats,
    SampleTerm, TrainConfig, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::arbitrage::IpmOptions;
use crate::domain::{PriceSeries, Sample, SensitivityModel, StorageParams};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::predictor::{NetSpec, PretrainConfig};

/// Net architecture without its input and output widths, which follow from
/// the data and the horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn spec(&self, input_dim: usize, horizon: usize) -> NetSpec {
        let mut layers = vec![input_dim];
        layers.extend(&self.hidden);
        layers.push(horizon);
        NetSpec::new(layers, self.seed)
    }
}

/// Single configuration shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub storage: StorageParams,
    pub sensitivity: SensitivityModel,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Interior-point options for every inner solve.
    pub solver: IpmOptions,
    pub horizon: usize,
    pub stride: usize,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
    /// Master seed recorded in manifests.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            storage: StorageParams::default(),
            sensitivity: SensitivityModel::PRICE_TAKER,
            net: NetConfig::default(),
            loss: LossConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            solver: IpmOptions::default(),
            horizon: 24,
            stride: 1,
            threads: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.storage.validate()?;
        self.sensitivity.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.horizon == 0 || self.stride == 0 {
            return Err(Error::invalid("horizon and stride must be positive"));
        }
        if self.net.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if self.solver.max_iter == 0 || !(self.solver.tol > 0.0 && self.solver.accept_tol >= self.solver.tol && self.solver.accept_abs > 0.0) {
            return Err(Error::invalid("solver needs max_iter > 0 and 0 < tol ≤ accept_tol, accept_abs > 0"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be positive"));
        }
        Ok(())
    }

    /// Derives the init, shuffling and noise seeds from `seed`.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.net.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.loss.seed = seed;
        self
    }

    /// Training settings with this run's solver options.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            solver: self.solver,
            ..self.train
        }
    }

    pub fn backtest_config(&self, mode: Mode, start: Option<usize>, end: Option<usize>) -> BacktestConfig {
        BacktestConfig {
            horizon: self.horizon,
            start,
            end,
            mode,
            solver: self.solver,
        }
    }

    /// Labelled samples of `series` under this run's settings.
    pub fn dataset(&self, series: &PriceSeries) -> Result<Vec<Sample>> {
        build_dataset_solver(series, &self.storage, &self.sensitivity, self.horizon, self.stride, &self.solver)
    }

    /// Loss settings with the clearing sensitivity of this run.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            sensitivity: self.sensitivity,
            ..self.loss
        }
    }
}
