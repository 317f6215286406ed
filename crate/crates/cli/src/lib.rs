//! Batch front-end for `swcalib`: run configs, metrics reports and the
//! subcommand implementations behind the `swcalib` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::RunConfig;
pub use error::{exit, CliError, CliResult};
pub use report::MetricsReport;

/// JSON schema of [`MetricsReport`].
pub const METRICS_SCHEMA: &str = include_str!("../schemas/metrics_report.json");
/// JSON schema of [`RunConfig`].
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schemas/run_config.json");

/// Caps the global worker pool from `SWCALIB_THREADS` when set.
pub fn init_threads() -> Result<(), swcalib::Error> {
    let Ok(raw) = std::env::var("SWCALIB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| swcalib::Error::Config(format!("SWCALIB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| swcalib::Error::Config(format!("thread pool: {e}")))
}
