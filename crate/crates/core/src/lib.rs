//! Surrogate-augmented deep panel modeling.
//!
//! The crate is organised along the estimation pipeline:
//!
//! * [`panel`] holds the panel container, aggregation rules and chronological splits.
//! * [`numerics`] provides least squares, a Jacobi SVD and equicorrelated Gaussian draws.
//! * [`synth`] simulates panels with latent group structure and correlated surrogate noise.
//! * [`mlp`] is a small dense network engine with exact gradients and Adam.
//! * [`surrogate`] fits per-unit surrogate networks and builds residual features (stage 1).
//! * [`deep_panel`] trains the shared backbone with grouped unit heads (stage 2).
//! * [`conformal`] builds group-wise split conformal intervals.
//! * [`baselines`] has the linear panel baselines and PMSE.
//! * [`pipeline`] chains the stages and runs the simulated method comparison.
//! * [`metrics`] scores recovered group partitions.

pub mod baselines;
pub mod conformal;
pub mod deep_panel;
mod error;
pub mod metrics;
pub mod mlp;
pub mod numerics;
pub mod panel;
pub mod pipeline;
pub mod rng;
pub mod surrogate;
pub mod synth;

pub use error::{Error, Result};

/// Caps the worker threads used for parallel replications and region fits.
/// Must be called before any parallel work starts.
pub fn set_thread_limit(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}
