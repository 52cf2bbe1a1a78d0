//! Decision-focused predict-then-bid toolkit for energy-storage arbitrage.
//!
//! A price predictor feeds a horizon arbitrage program; the duals of its SoC
//! transitions at a grid of initial SoC levels become segmented bids, which
//! a per-interval market clears. Training backpropagates a perturbed
//! Fenchel-Young loss through the clearing, the dual sensitivities and the
//! predictor.

pub mod arbitrage;
pub mod bids;
pub mod clearing;
pub mod domain;
pub mod error;
pub mod exec;
pub mod kktdiff;
pub mod linalg;
pub mod loss;
pub mod pipeline;
pub mod predictor;
pub mod synth;

pub use error::{Error, Result};
