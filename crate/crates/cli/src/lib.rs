//! Experiment configuration, execution and output for the `savanna` binary.

pub mod config;
pub mod plot;
pub mod records;
pub mod run;

use records::FailureEntry;
use run::RunOutcome;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config at {path}: {message}")]
    ConfigInvalid { path: String, message: String },
    #[error("{} task(s) failed", failures.len())]
    PartialFailure {
        failures: Vec<FailureEntry>,
        outcome: Box<RunOutcome>,
    },
    #[error("i/o: {0}")]
    Io(String),
    #[error("simulation: {0}")]
    Simulation(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::ConfigInvalid {
            path: path.into(),
            message: msg.into(),
        }
    }

    /// Process exit status: 2 for configuration errors, 3 when some tasks
    /// failed but partial results were written.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid { .. } => 2,
            CliError::PartialFailure { .. } => 3,
            _ => 1,
        }
    }
}
