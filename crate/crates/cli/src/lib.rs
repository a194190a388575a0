//! End-to-end pipeline behind the `ralf` binary: synthetic data, training, map
//! building, localization, evaluation and plots.

pub mod config;
pub mod data;
pub mod pipeline;
pub mod plot;

use std::path::Path;

use thiserror::Error;

pub use config::{Preset, RalfConfig};

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<ralf_core::dataset::DatasetError> for CliError {
    fn from(e: ralf_core::dataset::DatasetError) -> Self {
        use ralf_core::dataset::DatasetError as E;
        match e {
            E::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ralf_core::database::DatabaseError> for CliError {
    fn from(e: ralf_core::database::DatabaseError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ralf_core::evaluation::EvalError> for CliError {
    fn from(e: ralf_core::evaluation::EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ralf_core::io::IoError> for CliError {
    fn from(e: ralf_core::io::IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ralf_net::NetError> for CliError {
    fn from(e: ralf_net::NetError) -> Self {
        use ralf_net::NetError as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Checkpoint(_) | E::Io(_) | E::Json(_) | E::Dataset(_) | E::Shape(_) => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<S: serde::Serialize + ?Sized>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| CliError::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, CliError> {
    let s = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
