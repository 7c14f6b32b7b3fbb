//! Core numerics for hazard-modulated policy optimization.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation:
//!
//! - [`ratio`]: the log-fidelity modulator, the decoupled hazard penalty and
//!   the gradient multiplier together with its closed-form bound.
//! - [`advantage`]: group-relative advantage normalization.
//! - [`objective`]: per-token surrogate terms for the modulated objective and
//!   the clipped baselines, and batch aggregation.
//! - [`policy`], [`env`], [`rollout`]: a Markov logit-table policy, rule-based
//!   reward environments and a seeded group sampler.
//! - [`optim`], [`trainer`]: optimizers and the rollout/update loop.
//!
//! IO, configuration files, reports and the command line live in the `mhpo`
//! companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![deny(missing_docs)]

extern crate alloc;

pub mod advantage;
pub mod env;
mod error;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod ratio;
pub mod rollout;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
