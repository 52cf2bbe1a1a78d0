//! Synthetic three-stage versus decision-focused comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::pretrain_mse;
use crate::synth::{generate, SynthConfig};

use super::{backtest, train_decision_focused, EpochStats, Mode, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub synth: SynthConfig,
    pub train_days: usize,
    pub test_days: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            synth: SynthConfig::default(),
            train_days: 90,
            test_days: 30,
        }
    }
}

impl ExperimentConfig {
    /// Derives every seed of the run (data, init, shuffling, noise) from `seed`.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.run = self.run.reseeded(seed);
        self.synth.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub three_stage_profit: f64,
    pub df_profit: f64,
    pub pretrain_trace: Vec<f64>,
    pub df_trace: Vec<EpochStats>,
}

/// Generates `train_days + test_days` of data, pretrains on MSE, fine-tunes
/// with the decision-focused loss, and backtests both on the test days.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let run = &cfg.run;
    run.validate()?;
    if cfg.train_days == 0 || cfg.test_days == 0 {
        return Err(Error::invalid("train and test spans must be non-empty"));
    }
    let series = generate(&SynthConfig {
        days: cfg.train_days + cfg.test_days,
        ..cfg.synth
    })?;
    let split = cfg.train_days * series.intervals_per_day();
    let train = series.slice(0..split);
    let dataset = run.dataset(&train)?;
    let spec = run.net.spec(dataset[0].x.x.len(), run.horizon);
    let (pretrained, pretrain_trace) = pretrain_mse(&dataset, &spec, &run.pretrain)?;
    let state = train_decision_focused(&dataset, pretrained.clone(), &run.storage, &run.loss_config(), &run.train_config())?;
    let bt = |mode| run.backtest_config(mode, Some(split), None);
    let three = backtest(&series, &pretrained, &run.storage, &run.sensitivity, &bt(Mode::ThreeStage))?;
    let df = backtest(&series, &state.predictor, &run.storage, &run.sensitivity, &bt(Mode::Df))?;
    Ok(ExperimentOutcome {
        three_stage_profit: three.final_profit(),
        df_profit: df.final_profit(),
        pretrain_trace,
        df_trace: state.trace,
    })
}
