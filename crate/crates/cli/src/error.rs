use thiserror::Error;

use sare_core::attacks::AttackError;
use sare_core::metrics::MetricsError;
use sare_core::synthworld::WorldError;
use sare_core::toymodel::ModelError;
use sare_core::tsam::TsamError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("config hash mismatch in {path}: expected {expected}, found {found}")]
    HashMismatch { path: String, expected: String, found: String },
    #[error("{0} exists from a different config; pass --force to overwrite")]
    Exists(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::HashMismatch { .. } | CliError::Exists(_) | CliError::Io(_) => 1,
            CliError::MissingArtifact(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TsamError> for CliError {
    fn from(e: TsamError) -> Self {
        match e {
            TsamError::NonFinite(_) | TsamError::Diverged { .. } | TsamError::Radius(_) => CliError::Numerical(e.to_string()),
            TsamError::Model(m) => m.into(),
            TsamError::Objective(sare_core::objectives::ObjectiveError::NonFinite(_)) => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Autodiff(_) => CliError::Numerical(e.to_string()),
            ModelError::Checkpoint(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Io(m) => CliError::Io(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Model(m) => m.into(),
            AttackError::Train(t) => t.into(),
            AttackError::Metrics(m) => m.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}
