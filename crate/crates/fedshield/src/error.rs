use std::path::PathBuf;

use fedshield_core::Error as CoreError;

/// Process exit codes. Stable across releases.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const BAD_CONFIG: i32 = 2;
    pub const SINGLE_CLASS: i32 = 3;
    pub const FEATURE_LENGTH: i32 = 4;
    pub const NUMERIC: i32 = 5;
    pub const NO_SCORES: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}:{line}: {message}")]
    ConfigSyntax { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}: log carries no probe scores")]
    NoScores(PathBuf),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Config(_) | CoreError::OutOfRange { .. } | CoreError::TooFewClients { .. } => exit::BAD_CONFIG,
        CoreError::SingleClass => exit::SINGLE_CLASS,
        CoreError::FeatureLength { .. } => exit::FEATURE_LENGTH,
        CoreError::Client { source, .. } => core_code(source),
        _ => exit::NUMERIC,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigSyntax { .. } | CliError::Config(_) => exit::BAD_CONFIG,
            CliError::Io { .. } | CliError::Json { .. } | CliError::Format { .. } => exit::IO,
            CliError::NoScores(_) => exit::NO_SCORES,
            CliError::Core(e) => core_code(e),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Json { path, source }
    }
}
