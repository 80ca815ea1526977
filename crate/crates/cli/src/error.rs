use dualarm_core::agent::AgentError;
use dualarm_core::harness::HarnessError;
use dualarm_core::nn::NnError;
use dualarm_core::pose::PoseError;
use thiserror::Error;

/// Exit codes, one per failure class. Clap itself exits with 2 on usage errors.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
    pub const IO: i32 = 6;
    pub const RUNTIME: i32 = 7;
    pub const EMPTY_REPORT: i32 = 8;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("run failed: {0}")]
    Runtime(String),
    #[error("nothing to report: {0}")]
    EmptyReport(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::MissingFile(_) => exit::MISSING_FILE,
            CliError::Checkpoint(_) => exit::CHECKPOINT,
            CliError::Io(_) => exit::IO,
            CliError::Runtime(_) => exit::RUNTIME,
            CliError::EmptyReport(_) => exit::EMPTY_REPORT,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(e.to_string())
        } else {
            CliError::Io(e.to_string())
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(io) => io.into(),
            NnError::NonFiniteGradient(_) => CliError::Runtime(e.to_string()),
            other => CliError::Checkpoint(other.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::InvalidConfig(m) => CliError::Config(m),
            AgentError::Checkpoint(m) => CliError::Checkpoint(m),
            AgentError::Nn(n) => n.into(),
            AgentError::Io(io) => io.into(),
            AgentError::Csv(c) => CliError::Io(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<PoseError> for CliError {
    fn from(e: PoseError) -> Self {
        match e {
            PoseError::InvalidInput(m) | PoseError::InvalidShape(m) => CliError::Config(m),
            PoseError::Checkpoint(m) => CliError::Checkpoint(m),
            PoseError::Nn(n) => n.into(),
            PoseError::Io(io) => io.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(m) => CliError::Config(m),
            HarnessError::EmptyReport => CliError::EmptyReport(e.to_string()),
            HarnessError::Agent(a) => a.into(),
            HarnessError::Pose(p) => p.into(),
            HarnessError::Io(io) => io.into(),
            HarnessError::Csv(c) => CliError::Io(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<dualarm_core::env::EnvError> for CliError {
    fn from(e: dualarm_core::env::EnvError) -> Self {
        match e {
            dualarm_core::env::EnvError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<toml::ser::Error> for CliError {
    fn from(e: toml::ser::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<dualarm_core::predictor::PredictorError> for CliError {
    fn from(e: dualarm_core::predictor::PredictorError) -> Self {
        use dualarm_core::predictor::PredictorError as P;
        match e {
            P::InvalidInput(m) => CliError::Config(m),
            P::Io(io) => io.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
