//! Energy-based autoregressive generation of neural spike trains.
//!
//! End-to-end pipeline: a synthetic Lorenz benchmark, a Poisson latent
//! autoencoder (stage 1), an energy-score-trained masked autoregressive
//! transformer with a noise-conditioned MLP generator (stage 2), conditional
//! generation via classifier-free guidance, spike-statistics evaluation, and
//! closed-loop ridge decoding.
//!
//! - [`numerics`] — seeded random streams, tensors, reverse-mode autodiff
//! - [`lorenz`] — synthetic benchmark generation
//! - [`autoencoder`] — stage 1: spikes <-> latents under a Poisson model
//! - [`energy_transformer`] — stage 2: masked autoregressive energy model
//! - [`trainer`] — optimizer, schedule, fit loop, checkpoints
//! - [`metrics`] — spike statistics and the closed-loop ridge validator
//! - [`cli`], [`config`], [`dataset_file`] — command surface and containers

pub mod autoencoder;
pub mod cli;
pub mod config;
pub mod data;
pub mod dataset_file;
pub mod energy_transformer;
pub mod error;
pub mod lorenz;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod trainer;

pub use error::{EagError, Result};
