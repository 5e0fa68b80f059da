//! Scenario runner, ε sweeps, artifact output and the verification suite.

use std::path::Path;

pub mod config;
pub mod output;
pub mod presets;
pub mod report;
pub mod run;
pub mod verify;

pub use config::Scenario;
pub use report::{Check, RunReport, RunResults};
pub use run::{run_scenario, sweep_epsilon};
pub use verify::{verify_all, VerifyOptions, VerifyReport};

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("cannot parse config: {message}")]
    Parse { message: String },
    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("nothing to verify")]
    NothingToVerify,
    #[error(transparent)]
    Core(#[from] nsbohm::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for anything wrong with the input, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Parse { .. }
            | LabError::Config { .. }
            | LabError::UnknownPreset(_)
            | LabError::NothingToVerify => 2,
            _ => 1,
        }
    }
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, LabError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LabError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}
