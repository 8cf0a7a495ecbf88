//! Configuration, orchestration and file output for the CCDMR simulator.

pub mod config;
pub mod fitcsv;
pub mod manifest;
pub mod orchestrate;

pub use config::{load_config, parse_config, to_toml, validate, ConfigErrors, Diagnostic, ExperimentConfig};
pub use manifest::RunManifest;
pub use orchestrate::{orchestrate, run_text, RunOptions};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Core(#[from] ccdmr_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}
