//! Deep regression with calibrated prediction intervals.
//!
//! Two uncertainty estimators, Monte-Carlo dropout and conditional quantiles,
//! are trained through the heteroscedastic Gaussian likelihood so that their
//! intervals come out calibrated without a separate recalibration step. The
//! plain MC-dropout and heteroscedastic-network baselines are included for
//! comparison, together with the calibration metrics and the benchmark runner.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod objectives;

pub use error::{Error, Result};
