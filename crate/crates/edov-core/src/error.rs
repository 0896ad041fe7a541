use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("path not found: {0}")]
    MissingPath(PathBuf),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format ({0})")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty class {0}")]
    EmptyClass(usize),

    #[error("no classes found under {0}")]
    ZeroClasses(PathBuf),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),

    #[error("unknown corruption {0:?}")]
    UnknownCorruption(String),

    #[error("parameter manifests do not match: {0}")]
    ManifestMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
