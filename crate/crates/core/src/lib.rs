//! Mixture-of-experts actor-critic with task-oriented perturbation,
//! dormant-neuron diagnostics and a small suite of toy control tasks.

pub mod analysis;
pub mod autodiff;
pub mod dormant;
pub mod envs;
pub mod error;
pub mod harness;
pub mod moe;
pub mod perturb;
pub mod rlcore;

pub use error::{Error, Result};
