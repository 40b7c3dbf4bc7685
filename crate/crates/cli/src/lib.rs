//! Experiment runner for the `dapspp` sampler: JSON configs with task
//! presets, per-seed runs, parameter sweeps, diagnostics and oracle checks.

pub mod arrayfile;
pub mod config;
pub mod image_prior;
pub mod presets;
pub mod runner;

pub use arrayfile::ArrayFile;
pub use config::{ConfigError, RunConfig};

/// Exit status for an error: 2 for configuration problems, 3 for a
/// non-finite abort inside the sampler, 1 for anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<dapspp_core::Error>() {
        Some(dapspp_core::Error::NonFinite { .. }) => 3,
        Some(dapspp_core::Error::InvalidParameter { .. }) => 2,
        _ => 1,
    }
}
