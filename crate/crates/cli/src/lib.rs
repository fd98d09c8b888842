//! Command-line workbench: container generation, hyperparameter sweeps,
//! training, evaluation, plotting and gradient checks.
//!
//! Each command writes its artifacts into one run directory together with a
//! `manifest.txt` holding the fully resolved configuration.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;
use unload_core::env::EnvError;

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

/// Environment variable naming the root directory for run outputs.
pub const OUT_ENV: &str = "UNLOAD_OUT";

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const GENERATION: i32 = 3;
    pub const IO: i32 = 4;
    pub const LIVELOCK: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("container generation failed: {0}")]
    Generation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("policy stalled: {0}")]
    Livelock(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Run(EnvError),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Generation(_) => exit::GENERATION,
            CliError::Io { .. } => exit::IO,
            CliError::Livelock(_) => exit::LIVELOCK,
            CliError::Check(_) | CliError::Run(_) => exit::FAILURE,
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Generation(g) => CliError::Generation(g.to_string()),
            EnvError::Livelock { .. }
            | EnvError::AllMasked { .. }
            | EnvError::NoProgress { .. } => CliError::Livelock(e.to_string()),
            EnvError::InvalidConfig(m) => CliError::Validation(m),
            EnvError::Dqn(d @ unload_core::dqn::DqnError::InvalidConfig { .. }) => {
                CliError::Validation(d.to_string())
            }
            other => CliError::Run(other),
        }
    }
}

/// Directory for a run: the explicit path if given, otherwise
/// `$UNLOAD_OUT/<name>` (or `runs/<name>` when the variable is unset).
pub fn run_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(name)
        }
    }
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Creates `path` and hands a buffered writer to `body`.
pub fn write_file(
    path: &Path,
    body: impl FnOnce(&mut dyn io::Write) -> io::Result<()>,
) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = io::BufWriter::new(file);
    body(&mut w)
        .and_then(|_| io::Write::flush(&mut w))
        .map_err(|e| CliError::io(path, e))
}
