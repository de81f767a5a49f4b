//! Distribution-free calibration of regression uncertainty.
//!
//! Heuristic uncertainty estimates (Gaussian sigmas, sample sets, quantile
//! regressors) are turned into confidence intervals with finite-sample
//! coverage guarantees using split conformal prediction, optionally
//! conditioned on discrete groups or on bins of a continuous attribute.

pub mod conditional;
pub mod conformal;
pub mod error;
pub mod metrics;
pub mod quantile_fit;
pub mod record;
pub mod scores;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
