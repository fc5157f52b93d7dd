//! Command-line orchestration of the three analyses.
//!
//! A run reads one JSON [`RunConfig`](config::RunConfig), executes the
//! requested stages over every `(model, concept)` dataset and writes
//! `case1.csv`, `case2.csv`, `case3.csv` and `summary.json` into the output
//! directory. All per-stage randomness is derived from the single global
//! seed, so two runs with the same config produce byte-identical CSVs.

pub mod config;
pub mod fixture;
pub mod pipeline;

use std::path::{Path, PathBuf};

pub use config::RunConfig;
pub use pipeline::{run, Report, Stage};

/// `git describe` of the source tree the binary was built from.
pub const GIT_DESCRIBE: &str = env!("STRATGEO_GIT_DESCRIBE");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("cache {} does not match its recorded hash", path.display())]
    CacheMismatch { path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Bundle(#[from] stratgeo::tensorio::BundleError),
    #[error("{model}/{concept}: {source}")]
    Analysis {
        model: String,
        concept: String,
        #[source]
        source: stratgeo::Error,
    },
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code: 2 for configuration and dependency problems, 3
    /// for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingDependency(_) | CliError::CacheMismatch { .. } => 2,
            CliError::Analysis { source, .. } if source.is_numerical() => 3,
            _ => 1,
        }
    }
}
