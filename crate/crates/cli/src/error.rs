//! Error classes and their exit codes.

use qrnn_core::data::DataError;
use qrnn_core::eval::{EvalError, MaskError};
use qrnn_core::gates::GateError;
use qrnn_core::pruning::PruneError;
use qrnn_core::sru::SruError;
use qrnn_core::storage::StorageError;
use qrnn_core::train::TrainError;
use qrnn_core::ModelError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or unsatisfiable request.
    Config(String),
    /// Missing or malformed inputs on disk.
    Data(String),
    /// Training produced a non-finite loss or parameter.
    Divergence(String),
    Other(String),
    /// Help or version was printed; nothing failed.
    Exit,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Exit => 0,
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Other(m) => f.write_str(m),
            CliError::Divergence(m) => write!(f, "{m}"),
            CliError::Exit => Ok(()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<StorageError> for CliError {
    fn from(e: StorageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GateError> for CliError {
    fn from(e: GateError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SruError> for CliError {
    fn from(e: SruError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownMethod(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            TrainError::NoFeasiblePoint => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
