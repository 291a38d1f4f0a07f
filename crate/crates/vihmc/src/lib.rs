//! Hybrid variational-inference / Hamiltonian Monte Carlo posterior sampling
//! for small neural networks and operator networks.
//!
//! The pipeline has three stages:
//! 1. mean-field Gaussian VI over all network parameters,
//! 2. variance-based sensitivity ranking of the parameters, and
//! 3. HMC over the influential subset with the rest frozen at their VI means.
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `vihmc` binary for the config-driven pipeline.

pub mod artifacts;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod hmc;
pub mod network;
pub mod pipeline;
pub mod sensitivity;
pub mod tape;
pub mod vi;

pub use error::Error;
