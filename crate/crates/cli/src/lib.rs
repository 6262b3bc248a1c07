//! Experiment harness for the deep linear network SDE library: configs,
//! single runs, sweeps, ensembles, stationary analysis and the oracle suite.

pub mod config;
pub mod lab;
pub mod oracles;

pub use config::{Command, ExperimentConfig, SweepAxis, TeacherBasis};

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numerical abort: non-finite parameter at step {step} in layer {layer}")]
    Numerical { step: u64, layer: usize },

    #[error("{0}")]
    Core(dlnsde::Error),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl From<dlnsde::Error> for LabError {
    fn from(e: dlnsde::Error) -> Self {
        match e {
            dlnsde::Error::NumericalAbort { step, layer } => Self::Numerical { step, layer },
            other => Self::Core(other),
        }
    }
}

impl LabError {
    /// 0 success, 1 config/usage, 2 oracle failure, 3 non-finite state.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::Numerical { .. } => 3,
            Self::Config(_) | Self::Core(_) | Self::Io { .. } => 1,
        }
    }
}
