use std::process::ExitCode;

/// Failure classes, each with its own process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or missing input files.
    #[error("usage: {0}")]
    Usage(String),
    /// Input that exists but cannot be used (malformed manifest, audio,
    /// labels, stored artifacts).
    #[error("data: {0}")]
    Data(String),
    /// Anything that fails while running (training, checkpoints, locks).
    #[error("run: {0}")]
    Run(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Run(_) => 4,
        }
    }

    pub fn to_exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

impl From<ser_core::Error> for CliError {
    fn from(e: ser_core::Error) -> Self {
        match e {
            ser_core::Error::Io(_) | ser_core::Error::Image(_) => CliError::Run(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ser_model::Error> for CliError {
    fn from(e: ser_model::Error) -> Self {
        match e {
            ser_model::Error::Core(inner) => inner.into(),
            ser_model::Error::Config(m) => CliError::Usage(format!("config: {m}")),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
