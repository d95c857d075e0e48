//! Simulation, estimation, and training library for two-stage adaptive
//! frequency estimation with a single NV-centre spin.
//!
//! A fixed-design Bayesian neural network narrows the field range, then a
//! policy network picks adaptive Ramsey designs over a particle-filter
//! posterior on the narrowed subrange.

pub mod error;
pub mod fed;
pub mod model;
pub mod nn;
pub mod posterior;
pub mod protocols;
pub mod policy;
pub mod rng;
pub mod stage1;

pub use error::{Error, Result};
