use thiserror::Error;

use crate::cgo::CgoError;
use crate::dataset::DatasetError;
use crate::fem::FemError;
use crate::lm::LmError;
use crate::media::MediaError;
use crate::mesh::MeshError;
use crate::source::SourceError;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-level error. Each module has its own error enum; this one wraps them
/// so that pipelines can use `?` across stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Cgo(#[from] CgoError),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by invalid input (configs, files, parameters),
    /// false for numerical failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::Fem(e) => e.is_validation(),
            Error::Lm(e) => e.is_validation(),
            Error::Cgo(e) => e.is_validation(),
            Error::Mesh(MeshError::ResourceLimit { .. }) => false,
            _ => true,
        }
    }
}
