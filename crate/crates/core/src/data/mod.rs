//! MNIST ingestion and Multi-MNIST grid datasets.

pub mod batch;
pub mod format;
pub mod idx;
pub mod mmnist;
pub mod target;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use batch::{padded_dims, Batch};
pub use format::{read_dataset, write_dataset};
pub use idx::{load_idx, Mnist, Split};
pub use mmnist::{
    gen_by_loc, gen_by_ref, generate, Family, Grid, Header, MultiMnistDataset, RefInfo, Sample,
    TaskKind, TaskSpec,
};
pub use target::gaussian_target;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad {what} magic: expected {expected}, found {actual}")]
    BadMagic {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("unsupported {what} version {actual} (expected {expected})")]
    Version {
        what: &'static str,
        expected: u32,
        actual: u32,
    },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("MNIST source has no images for digit {0}")]
    EmptySource(u8),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
