//! Localized particle filtering for a stochastic rotating shallow water model.
//!
//! The crate is organised bottom-up: [`grid`] owns the staggered state and the
//! domain decomposition, [`swe`] advances it, [`noise`] supplies the transport
//! and jitter bases, [`filter`] and [`localization`] implement the global and
//! localized assimilation steps, and [`experiment`] wires everything into
//! twin experiments.

pub mod error;
pub mod experiment;
pub mod filter;
pub mod grid;
pub mod localization;
pub mod metrics;
pub mod noise;
pub mod observations;
pub mod rng;
pub mod swe;

pub use error::{Error, Result};
