//! Std companion of `nnchip-core`: datasets, file formats, reports and the
//! command-line pipeline.

use std::path::PathBuf;

pub mod commands;
pub mod config;
pub mod idx;
pub mod manifest;
pub mod pipeline;
pub mod report;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Idx(#[from] idx::IdxError),
    #[error(transparent)]
    Manifest(#[from] manifest::ManifestError),
    #[error(transparent)]
    Model(#[from] nnchip_core::models::ModelError),
    #[error("training: {0}")]
    Train(#[from] nnchip_core::train::TrainError),
    #[error(transparent)]
    Exec(#[from] nnchip_core::exec::ExecError),
    #[error(transparent)]
    Tune(#[from] nnchip_core::tuning::TuneError),
    #[error(transparent)]
    Hw(#[from] nnchip_core::hardware::HwError),
    #[error("placement: {0}")]
    Map(#[from] nnchip_core::mapping::MapError),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("test accuracy {accuracy:.2}% is below the {floor}% sanity floor; try more epochs or a smaller learning rate")]
    BelowFloor { accuracy: f64, floor: f64 },
    #[error("empty test set")]
    EmptyTestSet,
}

impl From<config::ConfigError> for Error {
    fn from(e: config::ConfigError) -> Self {
        match e {
            config::ConfigError::Io { path, source } => Error::Io { path, source },
            other => Error::Config(other.to_string()),
        }
    }
}

impl Error {
    /// Process exit code: 1 when a produced artifact fails its checks, 2 for
    /// I/O, configuration and input-format problems.
    pub fn exit_code(&self) -> i32 {
        use nnchip_core::hardware::HwError;
        use nnchip_core::tuning::TuneError;
        match self {
            Error::Validation(_) | Error::BelowFloor { .. } | Error::Train(_) | Error::Exec(_) => 1,
            Error::Hw(HwError::Invalid(_)) => 1,
            Error::Tune(TuneError::Config(_)) => 2,
            Error::Tune(_) => 1,
            _ => 2,
        }
    }
}
