//! On-disk formats: model checkpoints, episode files, and dataset
//! manifests.
//!
//! Every format is a small binary envelope around a JSON header so files
//! stay self-describing while bulk arrays remain compact.  All multi-byte
//! integers and floats are little-endian; all round trips are bit-exact.

mod checkpoint;
mod episode;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use episode::{
    dequantize_unit, quantize_unit, read_episode, write_episode, Episode, EPISODE_MAGIC,
    EPISODE_VERSION,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: wanted {wanted} more bytes")]
    Truncated { wanted: usize },
    #[error("array {name}: dtype {found:?}, expected {expected:?}")]
    DtypeMismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error("array {name}: {problem}")]
    BadArray { name: String, problem: String },
    #[error("{0}")]
    Corrupt(String),
}

impl StoreError {
    /// Stable machine-readable code, one per failure class.
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io(_) => "io",
            StoreError::Json(_) => "bad-header",
            StoreError::BadMagic { .. } => "bad-magic",
            StoreError::UnsupportedVersion(_) => "bad-version",
            StoreError::Truncated { .. } => "truncated",
            StoreError::DtypeMismatch { .. } => "dtype-mismatch",
            StoreError::BadArray { .. } => "bad-array",
            StoreError::Corrupt(_) => "corrupt",
        }
    }
}

pub(crate) fn read_exact_vec(bytes: &[u8], pos: &mut usize, n: usize) -> Result<Vec<u8>, StoreError> {
    if bytes.len() - *pos < n {
        return Err(StoreError::Truncated {
            wanted: n - (bytes.len() - *pos),
        });
    }
    let out = bytes[*pos..*pos + n].to_vec();
    *pos += n;
    Ok(out)
}

pub(crate) fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, StoreError> {
    let raw = read_exact_vec(bytes, pos, 4)?;
    Ok(u32::from_le_bytes(raw.try_into().unwrap()))
}
