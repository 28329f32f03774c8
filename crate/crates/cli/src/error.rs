use sonospeck::checkpoint::CheckpointError;
use sonospeck::config::ConfigError;
use sonospeck::evalkit::EvalError;
use sonospeck::io::IoError;
use sonospeck::rpn::RpnError;
use sonospeck::training::{self, TrainError};
use sonospeck::TensorError;
use thiserror::Error;

/// Exit statuses of the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad configuration, arguments or input values.
    Validation = 1,
    /// Numerical or runtime failure, including failed checks.
    Runtime = 2,
    /// File-system or file-format problem.
    Io = 3,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Image(#[from] IoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] RpnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    File { context: String, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn kind(&self) -> ExitKind {
        use ExitKind::*;
        match self {
            Self::Config(ConfigError::Io { .. }) => Io,
            Self::Config(_) | Self::Invalid(_) => Validation,
            Self::Image(IoError::Speckle(_)) => Validation,
            Self::Image(_) | Self::Checkpoint(_) | Self::File { .. } => Io,
            Self::Train(e) if training::is_non_finite(e) => Runtime,
            Self::Train(TrainError::Config(_) | TrainError::Speckle(_)) => Validation,
            Self::Train(TrainError::Io(_) | TrainError::Checkpoint(_)) => Io,
            Self::Train(TrainError::Model(e)) | Self::Model(e) => model_kind(e),
            Self::Train(_) => Runtime,
            Self::Eval(EvalError::ShapeMismatch(..) | EvalError::Config(_)) => Validation,
            Self::Eval(_) => Runtime,
            Self::Tensor(TensorError::NonFinite { .. }) => Runtime,
            Self::Tensor(_) => Validation,
            Self::Failed(_) => Runtime,
        }
    }
}

fn model_kind(e: &RpnError) -> ExitKind {
    match e {
        RpnError::Channels(_) | RpnError::TooSmall(_) | RpnError::Speckle(_) => ExitKind::Validation,
        _ => ExitKind::Runtime,
    }
}

pub fn file_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::File { context, source }
}
