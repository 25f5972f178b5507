//! File formats and synthetic data.

mod flo;
mod idx;
mod image_io;
mod kitti;
pub mod synth;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::types::ImageError;

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_INVALID};
pub use idx::{decode_idx, encode_idx_images, encode_idx_labels, read_idx, IdxData, IdxImages};
pub use image_io::{read_gray, write_flow_magnitude_pgm, write_gray_png16};
pub use kitti::{read_kitti_flow_png, write_kitti_flow_png};
pub use synth::{gen_synthetic_pair, DisplacementModel, SyntheticParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after declared contents")]
    TrailingBytes(usize),
    #[error("dimensions {0} overflow")]
    DimensionOverflow(String),
    #[error("unsupported image layout: {0}")]
    UnsupportedImage(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error("invalid synthetic parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
