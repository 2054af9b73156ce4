use indret_core::CoreError;
use thiserror::Error;

/// Application-level failures, each carrying the category tag used in the
/// CLI's single-line error output.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("persistence: {0}")]
    Persistence(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("config: {0}")]
    Config(String),
    #[error("compute: {0}")]
    Core(#[from] CoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl AppError {
    pub fn category(&self) -> &'static str {
        match self {
            AppError::Ingest(_) => "ingest",
            AppError::Persistence(_) => "persistence",
            AppError::Validation(_) => "validation",
            AppError::Config(_) => "config",
            AppError::Core(_) => "compute",
            AppError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
