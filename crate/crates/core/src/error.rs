use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// NIfTI decoding failures, kept separate so fuzzing can classify them.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NiftiError {
    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:?}; only single-file NIfTI-1 (n+1) is supported")]
    BadMagic([u8; 4]),
    #[error("header pair (ni1) files are not supported; convert to a single .nii")]
    HeaderPairUnsupported,
    #[error("invalid header size field {0}; expected 348 (NIfTI-2 is not supported)")]
    BadHeaderSize(i32),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality: {0}")]
    BadDimensions(String),
    #[error("invalid vox_offset {0}")]
    BadVoxOffset(f32),
    #[error("non-finite voxel value after scaling at index {0}")]
    NonFinite(usize),
    #[error("gzip stream is corrupt: {0}")]
    Gzip(String),
    #[error("volume shape {data} does not match header dims {header}")]
    ShapeMismatch { data: usize, header: usize },
    #[error("affine matrix is singular")]
    SingularAffine,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<Error> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty brain mask: no voxel above threshold")]
    EmptyMask,
    #[error("degenerate subject: feature vector has zero norm")]
    DegenerateSubject,
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),
}

impl Error {
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::File { source, .. } => source.exit_code(),
            Error::Config(_) | Error::Json(_) | Error::ArtifactMismatch(_) => 1,
            Error::Numeric(_) | Error::Nifti(NiftiError::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}
