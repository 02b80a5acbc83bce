//! Config-driven experiments over the `opaug` library.

pub mod config;
pub mod experiments;
pub mod output;

pub use config::{Config, ConfigError};
pub use experiments::{diagnose, run_bounds, run_scatter, run_sweep, RunError};
