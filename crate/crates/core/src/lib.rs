//! Conditional quantile neural processes.
//!
//! Neural processes whose predictive likelihood is a softmax-weighted
//! mixture of asymmetric Laplace distributions over sampled quantile
//! levels, alongside the Gaussian-likelihood baseline. Ships the data
//! protocols, the training loop, and the evaluation/ablation tooling,
//! all on a small reverse-mode core built for 64-bit CPU runs.

pub mod autodiff;
pub mod dist;
pub mod task;
pub mod train;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;

pub use error::CqnpError;
