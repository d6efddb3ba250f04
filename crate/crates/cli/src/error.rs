use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or inputs; exit code 2.
    #[error("usage: {0}")]
    Usage(String),
    /// Anything that went wrong while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl From<uniavatar_conditioning::Error> for CliError {
    fn from(e: uniavatar_conditioning::Error) -> Self {
        use uniavatar_conditioning::Error as E;
        match e {
            E::Usage(_) | E::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<uniavatar_render::Error> for CliError {
    fn from(e: uniavatar_render::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<uniavatar_mcss::Error> for CliError {
    fn from(e: uniavatar_mcss::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<uniavatar_core::Error> for CliError {
    fn from(e: uniavatar_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
