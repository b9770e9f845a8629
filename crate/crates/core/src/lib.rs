//! Deterministic diffusion sampling and voxel-level anomaly detection for
//! dense 3D volumes.
//!
//! The crate builds a pseudo-healthy-reconstruction pipeline around two
//! deterministic probability-flow samplers plus the classic stochastic
//! ancestral sampler, with bilateral guidance (a structural edge condition
//! and a template-intensity energy) steering the reverse process. Everything
//! runs on synthetic cortical-shell phantoms so results are reproducible
//! bit for bit.
//!
//! Module layout:
//! - [`volume`]: dense volume arithmetic, reductions and the TAUV format
//! - [`stats`]: Pearson correlation and Welch's t-test on score sequences
//! - [`schedule`]: variance-preserving noise schedule and step coefficients
//! - [`parametrize`]: conversions among v / epsilon / x0 / score predictions
//! - [`denoise`]: the denoiser interface, Gaussian-mixture oracle and the
//!   closed-form local-linear model
//! - [`codec`]: fixed analytic latent codec and edge-map extraction
//! - [`sample`]: ancestral, D1 and D2 reverse steppers and reconstruction
//! - [`guide`]: template energy, appearance statistic and its gradient
//! - [`pipeline`]: phantom cohorts, anomaly maps, classifier and evaluation
//! - [`config`] / [`commands`]: the file-driven CLI surface

pub mod codec;
pub mod commands;
pub mod config;
pub mod denoise;
pub mod error;
pub mod guide;
pub mod parametrize;
pub mod pipeline;
pub mod sample;
pub mod schedule;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, Mask, Volume};
