use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    /// `line`/`col` are 1-based; 0 when the problem has no position.
    #[error("{}", fmt_config(.line, .col, .message))]
    Config { line: usize, col: usize, message: String },

    #[error("{scheme} at {snr_db} dB: {source}")]
    Run {
        scheme: String,
        snr_db: f64,
        #[source]
        source: tosc_core::Error,
    },

    #[error(transparent)]
    Core(#[from] tosc_core::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_config(line: &usize, col: &usize, message: &str) -> String {
    if *line == 0 {
        format!("config error: {message}")
    } else {
        format!("config error at line {line}, column {col}: {message}")
    }
}

impl BenchError {
    pub fn config(message: impl Into<String>) -> Self {
        BenchError::Config { line: 0, col: 0, message: message.into() }
    }

    pub fn config_at(line: usize, col: usize, message: impl Into<String>) -> Self {
        BenchError::Config { line, col, message: message.into() }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            BenchError::Config { line, col, message } => {
                BenchError::Config { line, col, message: format!("{}: {message}", path.display()) }
            }
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
