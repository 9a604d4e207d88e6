use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(#[from] superrep::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("results store: {0}")]
    Csv(#[from] csv::Error),
    #[error("results store {} is locked by another run (remove the lock file if stale)", .0.display())]
    Locked(PathBuf),
    #[error("missing rows: {0}")]
    MissingRows(String),
}

pub type Result<T> = std::result::Result<T, CliError>;
