//! Bayesian calibration of forward models with an explicit model-bias term.
//!
//! Three pipelines share one toolkit: plain Bayesian inference without
//! bias, modular Kennedy–O'Hagan calibration with a Gaussian-process bias,
//! and calibration with an orthogonal Gaussian-process bias.

pub mod benchmarks;
pub mod calibration;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gp;
pub mod inference;
pub mod kernels;
pub mod models;
pub mod ogp;
pub mod optimize;

pub use error::{Error, Result};
