use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation blew up at step {step}: non-finite state")]
    SimulationBlowup { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("calibration infeasible: constraint `{constraint}` violated ({detail})")]
    CalibrationInfeasible { constraint: &'static str, detail: String },

    #[error("replication {index}: {source}")]
    Replication { index: usize, source: Box<Error> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

impl Error {
    /// CLI exit status: 1 for configuration and input problems, 2 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 1,
            Error::SimulationBlowup { .. }
            | Error::Numerical(_)
            | Error::CalibrationInfeasible { .. }
            | Error::Replication { .. } => 2,
        }
    }
}
