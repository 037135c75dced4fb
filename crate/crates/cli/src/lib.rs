//! Experiment runner behind the `maskbench` binary.
//!
//! Each command resolves an [`ExperimentConfig`], writes it next to its
//! outputs, and returns a [`CliError`] whose [`CliError::code`] is the
//! process exit status.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{
    cmd_compare, cmd_filter, cmd_gen, cmd_probe, cmd_score, cmd_train, load_corpus, Corpus, ProbeSource, RunRecord,
};
pub use config::{ExperimentConfig, PairSet};
pub use report::{CompareReport, CompareRow, RowStatus};

use maskbench::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<maskbench::Error> for CliError {
    fn from(e: maskbench::Error) -> Self {
        use maskbench::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Mask(_) => CliError::Usage(msg),
            E::Numeric(_) => CliError::Numeric(msg),
            E::Tensor(TensorError::NonFinite(_) | TensorError::DegenerateRow { .. }) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
