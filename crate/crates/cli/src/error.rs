use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config file not found: {}", .0.display())]
    MissingConfig(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error(
        "{}: written for configuration {found:016x}, current configuration is {expected:016x} (use --force to load it anyway)",
        path.display()
    )]
    ConfigMismatch { path: PathBuf, expected: u64, found: u64 },
    #[error("training stopped in epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: metaforge::Error,
    },
    #[error(transparent)]
    Core(#[from] metaforge::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 2 for problems with the invocation or configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingConfig(_) | CliError::Config(_) | CliError::ConfigMismatch { .. } => 2,
            CliError::Core(metaforge::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
