use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] anomgan::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }

    /// 2 for invalid input, 3 for a diverged run, 4 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        use anomgan::Error as E;
        match self {
            CliError::Validation(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) | E::Wiring(_) | E::UndefinedMetric(_) | E::Dataset(_) => 2,
                E::NonFinite { .. } => 3,
                E::Batch { .. }
                | E::Checkpoint(_)
                | E::Image { .. }
                | E::Io { .. }
                | E::Json(_)
                | E::Csv(_)
                | E::Plot(_) => 4,
            },
        }
    }
}
