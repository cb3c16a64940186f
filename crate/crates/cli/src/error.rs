use rfmpose::evalbench::EvalError;
use rfmpose::flowmatch::FlowError;
use rfmpose::netcore::NetError;
use rfmpose::rlrefine::RlError;
use rfmpose::synthdata::DataError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("numerical: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    /// The message on one line.
    pub fn diagnostic(&self) -> String {
        self.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) | DataError::Format(_) | DataError::FormatVersionMismatch { .. } => {
                CliError::Io(e.to_string())
            }
            DataError::BadShapeParams(_) => CliError::Config(e.to_string()),
            DataError::EmptyView(_) | DataError::DegenerateCloud(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(_) | NetError::Checkpoint(_) | NetError::MissingParam(_) => CliError::Io(e.to_string()),
            NetError::ShapeMismatch(_) | NetError::InvalidSpec(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Net(n) => n.into(),
            FlowError::NonFiniteVelocity { .. } | FlowError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            FlowError::EmptyBatch | FlowError::ZeroHorizon => CliError::Config(e.to_string()),
        }
    }
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::Flow(f) => f.into(),
            RlError::Net(n) => n.into(),
            RlError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            RlError::Config(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Flow(f) => f.into(),
            EvalError::Rl(r) => r.into(),
            EvalError::Geometry(_) => CliError::Numerical(e.to_string()),
            EvalError::EmptyTestSet | EvalError::MissingCritic | EvalError::Invalid(_) => {
                CliError::Config(e.to_string())
            }
        }
    }
}
