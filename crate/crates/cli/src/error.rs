use std::fmt;

use swcalib::{ContainerError, Error};

/// Process exit codes. Every failure path has its own code.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const FORMAT: i32 = 5;
    pub const SHAPE: i32 = 6;
    pub const DOMAIN: i32 = 7;
    pub const NON_FINITE: i32 = 8;
    pub const CALIBRATION_FAILED: i32 = 9;
    pub const GRADCHECK_FAILED: i32 = 10;
}

#[derive(Debug)]
pub enum CliError {
    Engine(Error),
    /// Calibration stopped on a non-finite value in `block` at `step`.
    CalibrationFailed { block: usize, step: usize, reason: String },
    /// Ops whose gradient check exceeded the tolerance.
    GradcheckFailed(Vec<String>),
    Csv(csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Engine(e) => match e {
                Error::Usage(_) => exit::USAGE,
                Error::Config(_) | Error::Json(_) => exit::CONFIG,
                Error::Io(_) => exit::IO,
                Error::Container(_) => exit::FORMAT,
                Error::Shape(_) => exit::SHAPE,
                Error::Domain { .. } => exit::DOMAIN,
                Error::NonFinite { .. } => exit::NON_FINITE,
            },
            CliError::CalibrationFailed { .. } => exit::CALIBRATION_FAILED,
            CliError::GradcheckFailed(_) => exit::GRADCHECK_FAILED,
            CliError::Csv(_) => exit::IO,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Engine(e) => write!(f, "{e}"),
            CliError::CalibrationFailed { block, step, reason } => {
                write!(f, "calibration failed in block {block} at step {step}: {reason}")
            }
            CliError::GradcheckFailed(ops) => write!(f, "gradient check failed for {}", ops.join(", ")),
            CliError::Csv(e) => write!(f, "csv: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Engine(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Engine(e.into())
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Engine(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Csv(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
