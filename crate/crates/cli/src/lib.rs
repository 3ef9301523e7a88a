//! Command-line front end: configuration, run manifests and the five
//! pipeline commands.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

pub use commands::execute;
pub use config::{Command, RunConfig, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config keys or missing inputs. Exit status 1.
    #[error("{0}")]
    Usage(String),
    /// Failure while running the pipeline. Exit status 2.
    #[error(transparent)]
    Runtime(#[from] incontext::Error),
    #[error("{context}: {source}")]
    Output {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) | CliError::Output { .. } => 2,
        }
    }

    pub(crate) fn output(context: impl Into<String>, path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Output {
            context: format!("{} ({})", context.into(), path.display()),
            source,
        }
    }
}

/// Where a finished run left its manifest.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub manifest: manifest::RunManifest,
}
