//! Quadratic optimal transport between discrete and continuous measures,
//! dual potentials, and central-limit inference for empirical transport costs.

pub mod error;
pub mod exact_ot;
pub mod inference;
pub mod io;
pub mod measures;
pub mod rng;
pub mod semidiscrete;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use rng::SeedSpec;
