//! Batch front end: spec checking, solving and refinement ladders.

pub mod check;
pub mod output;
pub mod run;
pub mod spec;

use std::fmt;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_MALFORMED: u8 = 3;
pub const EXIT_NO_CONVERGENCE: u8 = 4;

/// An error carrying the process exit code it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn malformed(msg: impl Into<String>) -> Self {
        Self { code: EXIT_MALFORMED, message: msg.into() }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Self { code: EXIT_VALIDATION, message: msg.into() }
    }

    pub fn no_convergence(msg: impl Into<String>) -> Self {
        Self { code: EXIT_NO_CONVERGENCE, message: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<mfswitch_core::Error> for CliError {
    fn from(e: mfswitch_core::Error) -> Self {
        use mfswitch_core::Error as E;
        let code = match e {
            E::NoConvergence { .. } | E::StepFloorReached { .. } | E::NonFiniteState { .. } | E::NonFiniteAdjoint { .. } => {
                EXIT_NO_CONVERGENCE
            }
            E::InvalidArgument(_) | E::InvalidSchedule(_) => EXIT_MALFORMED,
            _ => EXIT_VALIDATION,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::malformed(format!("i/o: {e}"))
    }
}
