use std::path::PathBuf;

use numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("duplicate row for ({date}, {symbol}) at line {line}")]
    Duplicate { date: String, symbol: String, line: u64 },
    #[error("no symbols survive the coverage filter")]
    EmptyUniverse,
    #[error("window error: {0}")]
    Window(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid portfolio vector: {0}")]
    InvalidPortfolio(String),
    #[error("lifecycle error: {0}")]
    Lifecycle(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
