//! Inverse reinforcement learning for mean-field games with latent contexts.
//!
//! The crate covers the forward mean-field machinery ([`mfg`]), the simulated
//! environments ([`envs`]), the entropy-regularised equilibrium solver
//! ([`solver`]), a small neural-network substrate ([`nn`]), the adversarial
//! baseline ([`mfairl`]), the context-aware meta learner ([`pemmfirl`]),
//! evaluation metrics ([`metrics`]), exact validation oracles ([`oracle`]) and
//! the taxi-pricing application ([`taxi`]).

pub mod cli;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod mfairl;
pub mod mfg;
pub mod nn;
pub mod oracle;
pub mod pemmfirl;
pub mod solver;
pub mod taxi;
pub mod training;

pub use error::{Error, Result};
