//! Configuration, command dispatch and deterministic report files for the
//! `spn-bloch` binary.

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

pub use commands::{run, Command, Outcome};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// A checked physical condition does not hold.
    #[error("condition failed: {0}")]
    Condition(String),
    #[error("numerical failure: {0}")]
    Numerical(spn_bloch::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Condition(_) => 1,
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<spn_bloch::Error> for CliError {
    fn from(e: spn_bloch::Error) -> Self {
        use spn_bloch::Error as E;
        match e {
            E::JelliumViolation(_) => CliError::Condition(e.to_string()),
            E::Config(_)
            | E::Io(_)
            | E::InvalidDensity(_)
            | E::NonPositiveCharge(_)
            | E::ChargeMismatch { .. }
            | E::AliasingGuard { .. }
            | E::EpsilonBelowResolution { .. }
            | E::Precondition(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e),
        }
    }
}
