//! Config-driven experiment runner: category sweeps, noise sweeps, grid
//! search and weight comparison, written out as CSV, JSON, JSON-lines traces
//! and SVG plots.

pub mod config;
pub mod experiment;
pub mod output;
pub mod svg;

pub use config::{Algorithm, DatasetConfig, DatasetSource, ExperimentConfig, GridConfig, GridPreset, Protocol};
pub use experiment::{
    grid_search, run_experiment, weight_compare, Aggregate, DrawRecord, Outcome, RunRecord, WeightRow,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rfalcf_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(String),
    #[error("{failed} of {total} runs failed")]
    Partial { failed: usize, total: usize },
    #[error("all {total} runs failed numerically")]
    Numerical { total: usize },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit status: 1 usage, 2 partial failure, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(rfalcf_core::Error::Usage(_) | rfalcf_core::Error::Parse { .. })
            | CliError::Core(rfalcf_core::Error::Ragged { .. } | rfalcf_core::Error::Dimension(_)) => 1,
            CliError::Core(rfalcf_core::Error::Numerical { .. }) | CliError::Numerical { .. } => 3,
            CliError::Core(_) | CliError::Io { .. } | CliError::Serialize(_) | CliError::Partial { .. } => 2,
        }
    }
}
