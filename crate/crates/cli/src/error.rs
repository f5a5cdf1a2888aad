use std::path::Path;

use caw_core::mask::MaskError;
use caw_core::metrics::MetricsError;
use caw_core::nn::{NetError, TrainError};
use caw_core::pnm::PnmError;
use caw_core::synth::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 usage/config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Data(_) | CliError::Checkpoint(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PnmError> for CliError {
    fn from(e: PnmError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Shape(_)
            | NetError::Mismatch { .. }
            | NetError::ImageSize(_)
            | NetError::BadLabel { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Net(n) => n.into(),
            TrainError::EmptyDataset
            | TrainError::EmptyConcept(_)
            | TrainError::Mismatch { .. } => CliError::Data(e.to_string()),
            TrainError::Mask(m) => m.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        match e {
            MaskError::Net(n) => n.into(),
            MaskError::Align(_) | MaskError::BadPrototypes => CliError::Numerical(e.to_string()),
            MaskError::UnknownMode(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Net(n) => n.into(),
            MetricsError::NonFinite => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
