use vecheart::flowgen::FlowError;
use vecheart::model::ModelError;
use vecheart::phantom::PhantomError;
use vecheart::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::MissingStage1(_) => CliError::Missing(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite(_) => CliError::Numerical(e.to_string()),
            ModelError::NoSliceBranch => CliError::Missing(e.to_string()),
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFinite(_) => CliError::Numerical(e.to_string()),
            FlowError::Config(_) => CliError::Usage(e.to_string()),
            FlowError::Model(m) => m.into(),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::InvalidScale(_) => CliError::Usage(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}
