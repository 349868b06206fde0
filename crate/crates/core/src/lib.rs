//! Particle Monte Carlo for regularized McKean-Vlasov SDEs and calibrated
//! local stochastic volatility models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coefficients;
pub mod config;
pub mod diagnostics;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod fp;
pub mod kernel;
pub mod market;
pub mod rng;

pub use ensemble::ParticleEnsemble;
pub use error::{Error, Result};
