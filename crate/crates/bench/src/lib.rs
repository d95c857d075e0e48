//! Experiment harness for `nvsense`: configuration, artifact training,
//! seeded evaluation, windowed-MSE curves, and result files.

pub mod artifacts;
pub mod config;
pub mod diagnose;
pub mod error;
pub mod evaluate;
pub mod svg;
pub mod window;

pub use error::{BenchError, Result};
