use std::path::{Path, PathBuf};

/// Failures of a CLI command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: llpco::Error,
    },

    #[error(transparent)]
    Core(#[from] llpco::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for numeric failure, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::File { .. } => 4,
            CliError::Core(e) => match e {
                llpco::Error::NonFinite { .. } => 3,
                llpco::Error::Io(_) | llpco::Error::Format(_) | llpco::Error::UnsupportedVersion { .. } => 4,
                _ => 2,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn file(path: &Path) -> impl FnOnce(llpco::Error) -> CliError + '_ {
    move |source| CliError::File { path: path.to_path_buf(), source }
}
