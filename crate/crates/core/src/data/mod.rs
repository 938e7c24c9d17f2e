//! Dataset I/O: feature files, session manifests, T-window sampling and a
//! synthetic dyad generator.

mod features;
mod manifest;
mod sequence;
mod synthetic;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::TensorError;

pub use features::{
    decode_features, encode_features, read_feature_file, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use manifest::{
    load_manifest, write_manifest, ManifestEntry, ManifestParticipant, ParticipantTrack, SessionRecord, Split, Task,
};
pub use sequence::{sample_dataset, sample_sequences, SequenceSample};
pub use synthetic::{generate_synthetic, into_shared, write_dataset, Plant, SyntheticSpec, PLANT_BLOCK, SPARSE_FRACTION};

/// Window length beyond which sessions were not evaluated in the reference
/// experiments. Longer windows are allowed but flagged by the CLI.
pub const REFERENCE_MAX_T: usize = 12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: not a feature file")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    Version(u32),
    #[error("truncated feature file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("{0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("session {session}: {message}")]
    Alignment { session: String, message: String },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
