use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: header declares {expected} bytes of voxel data but found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: unsupported element type `{element}`")]
    UnknownElementType { path: PathBuf, element: String },

    #[error("{path}: malformed header: {message}")]
    Header { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("volume has no mask; supply one or sample the whole domain explicitly")]
    MissingMask,

    #[error("mask contains no voxels to sample")]
    EmptyMask,

    #[error("landmark lists differ in length ({fixed} target vs {moving} source)")]
    LandmarkMismatch { fixed: usize, moving: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite {what} at {context}")]
    NonFinite { what: String, context: String },

    #[error("amplitude {amplitude} violates the diffeomorphism bound ({bound})")]
    AmplitudeTooLarge { amplitude: f64, bound: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>, context: impl Into<String>) -> Self {
        Error::NonFinite {
            what: what.into(),
            context: context.into(),
        }
    }

    /// True for failures caused by numerics rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
