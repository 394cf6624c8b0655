use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite value in input")]
    NonFinite,

    #[error("batch of {0} rows is too small for batch statistics (need at least 2)")]
    BatchTooSmall(usize),

    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),

    #[error("class {0} has no samples")]
    MissingClass(usize),

    #[error("class index {label} out of range for {n_classes} classes")]
    UnknownClass { label: usize, n_classes: usize },

    #[error("inter-class distance is undefined with a single class")]
    SingleClass,

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersionMismatch { expected: u8, found: u8 },

    #[error("checksum mismatch or truncated payload")]
    CorruptChecksum,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from the numbers rather than the inputs
    /// or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NonFiniteLoss(_)
                | Error::TrainingDiverged { .. }
                | Error::NonFinite
        )
    }
}
