use algebraformer::autodiff::AutodiffError;
use algebraformer::bvp::BvpError;
use algebraformer::model::ModelError;
use algebraformer::newton::NewtonError;
use algebraformer::training::TrainError;

/// A failure classified by process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<BvpError> for CliError {
    fn from(e: BvpError) -> Self {
        match e {
            BvpError::Chebyshev(_) | BvpError::Linalg(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Autodiff(_) => CliError::Numerical(e.to_string()),
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::EmptyDataset | TrainError::DimensionMismatch(_) | TrainError::Io(_) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<NewtonError> for CliError {
    fn from(e: NewtonError) -> Self {
        match e {
            NewtonError::Model(m) => m.into(),
            NewtonError::Train(t) => t.into(),
            NewtonError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            NewtonError::Linalg(_) | NewtonError::Provider(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
