use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, detected before any compute.
    #[error("configuration error: {0}")]
    Config(String),

    /// Network wiring disagrees with its declared topology; indicates a build bug.
    #[error("wiring error: {0}")]
    Wiring(String),

    /// Input tensor does not match what the model was built for.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN or infinity surfaced in a forward pass or loss.
    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    /// One or more records of a batch failed to load.
    #[error("batch failed: {}", .failures.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect::<Vec<_>>().join("; "))]
    Batch { failures: Vec<(PathBuf, String)> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
