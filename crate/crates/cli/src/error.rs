use thiserror::Error;

/// Command failure, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("argument out of range: {0}")]
    Range(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Shape(_) => 5,
            CliError::Range(_) => 6,
        }
    }
}

impl From<vade::Error> for CliError {
    fn from(e: vade::Error) -> Self {
        use vade::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Usage(_) => CliError::Config(msg),
            E::Divergence { .. } | E::NonFinite { .. } | E::Domain { .. } => CliError::Divergence(msg),
            E::Dimension { .. } => CliError::Shape(msg),
            E::Input(_)
            | E::Degenerate(_)
            | E::Format { .. }
            | E::Parse { .. }
            | E::IncompatibleCheckpoint(_)
            | E::CorruptCheckpoint(_)
            | E::Io(_) => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
