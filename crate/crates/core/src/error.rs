use std::path::PathBuf;

/// Errors produced by the re-identification engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("format mismatch: {0}")]
    FormatMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("foreground mask is empty")]
    EmptyForeground,
    #[error("target {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },
    #[error("softmin identity loss requires identity prototypes")]
    MissingPrototypes,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("gallery index is empty")]
    EmptyIndex,
    #[error("ranking contains no relevant item")]
    NoRelevant,
    #[error("gallery is empty")]
    EmptyGallery,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}
