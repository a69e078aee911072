use std::path::Path;

use mealtwin_core::eval::EvalError;
use mealtwin_core::rlcore::NetError;
use mealtwin_core::simcore::SimError;
use mealtwin_core::trainer::TrainError;
use mealtwin_core::ConfigError;

/// Command failure, classified by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numerical(_) => 3,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        AppError::Data(msg.into())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        AppError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Data(format!("invalid scenario: {e}"))
    }
}

impl From<SimError> for AppError {
    fn from(e: SimError) -> Self {
        AppError::Data(format!("simulation failed: {e}"))
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> Self {
        AppError::Data(format!("bad event log: {e}"))
    }
}

impl From<NetError> for AppError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite(_) => AppError::Numerical(e.to_string()),
            _ => AppError::Data(format!("bad network: {e}")),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Plan(_) => AppError::Data(e.to_string()),
            TrainError::Sim(s) => s.into(),
            TrainError::SeriesTooShort { .. } => AppError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
