use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    Usage(String),

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("artifact {} does not match the manifest checksum", .0.display())]
    ChecksumMismatch(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config {}: {source}", path.display())]
    Config {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Core(#[from] nvsense::Error),
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 missing artifact, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use nvsense::Error as E;
        match self {
            BenchError::MissingArtifact { .. } | BenchError::ChecksumMismatch(_) => 2,
            BenchError::Core(E::MissingArtifact(_)) => 2,
            BenchError::Core(E::Diverged { .. } | E::DegeneratePosterior | E::DegenerateLikelihood(_)) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
