//! Bayesian inference for locally adaptive factor (LAF) processes.
//!
//! A LAF process describes a p-variate time series through a time-varying
//! mean `mu(t) = Theta xi(t) psi(t)` and covariance
//! `Sigma(t) = Theta xi(t) xi(t)^T Theta^T + Sigma0`, where the dictionary
//! functions `xi` and `psi` follow nested Gaussian processes with a Markovian
//! state-space form. This crate provides:
//!
//! - [`statespace`]: Kalman filter, smoother and simulation smoother with
//!   missing-data support.
//! - [`ngp`]: nested-GP transition blocks and the two observation systems used
//!   by the sampler.
//! - [`model`]: configuration, posterior draw types and composition of
//!   `(mu, Sigma)` paths.
//! - [`sampler`]: the Gibbs sampler.
//! - [`online`]: online updating with fixed hyperparameters and h-step
//!   prediction.
//! - [`synth`]: synthetic scenarios with locally varying (bumps) and smooth
//!   (GP) dictionaries.
//! - [`baselines`]: moving-average mean and EWMA covariance estimators.
//! - [`diagnostics`]: split-chain PSRF, hpd intervals and standardized error
//!   tables.

pub mod baselines;
pub mod data;
pub mod diagnostics;
mod error;
pub mod linalg;
pub mod model;
pub mod ngp;
pub mod online;
pub mod sampler;
pub mod statespace;
pub mod synth;

pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{LafConfig, MeanCovPath, PosteriorDraw};
