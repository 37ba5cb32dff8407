//! Model checkpoints: one file holding a JSON hyperparameter header
//! followed by the parameter tensors as length-prefixed little-endian
//! float32 blobs, in header-directory order.
//!
//! Layout:
//!
//! ```text
//! u32 LE   header byte length
//! [u8]     UTF-8 JSON header {kind, config, params: [{name, shape}, ..]}
//! repeat per params entry, in order:
//!   u32 LE   scalar count (= product of shape)
//!   [f32 LE] scalars, row-major
//! ```
//!
//! Parameters are stored as f32 and widened back to f64 on load, so a
//! load/save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use maskgrip_grad::{Arr, ParamSet};
use serde::{Deserialize, Serialize};

use super::{read_exact_vec, read_u32, StoreError};

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// A checkpoint read back from disk.
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamSet,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    params: &ParamSet,
) -> Result<(), StoreError> {
    let header = Header {
        kind: kind.to_string(),
        config: config.clone(),
        params: params
            .iter()
            .map(|(name, value)| ParamEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + 4 * params.num_scalars());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, value) in params.iter() {
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        for &v in value.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, StoreError> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let header_len = read_u32(&bytes, &mut pos)? as usize;
    let header_bytes = read_exact_vec(&bytes, &mut pos, header_len)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut params = ParamSet::new();
    for entry in &header.params {
        let expect: usize = entry.shape.iter().product();
        let count = read_u32(&bytes, &mut pos)? as usize;
        if count != expect {
            return Err(StoreError::BadArray {
                name: entry.name.clone(),
                problem: format!("blob holds {count} scalars, shape wants {expect}"),
            });
        }
        let raw = read_exact_vec(&bytes, &mut pos, 4 * count)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let arr = Arr::from_shape_vec(ndarray::IxDyn(&entry.shape), data).map_err(|_| {
            StoreError::BadArray {
                name: entry.name.clone(),
                problem: "shape/element count mismatch".to_string(),
            }
        })?;
        params.register(&entry.name, arr);
    }
    if pos != bytes.len() {
        return Err(StoreError::Corrupt(format!(
            "{} trailing bytes after last parameter blob",
            bytes.len() - pos
        )));
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample_params() -> ParamSet {
        let mut ps = ParamSet::new();
        let w = Arr::from_shape_vec(IxDyn(&[2, 3]), vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]).unwrap();
        ps.register("fc.w", w);
        ps.register("fc.b", Arr::zeros(IxDyn(&[3])));
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ps = sample_params();
        let config = serde_json::json!({"width": 16, "lr": 1e-3});
        save_checkpoint(&p1, "demo", &config, &ps).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.kind, "demo");
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.params.len(), 2);
        assert_eq!(loaded.params.value(0), ps.value(0));
        save_checkpoint(&p2, "demo", &loaded.config, &loaded.params).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn order_and_names_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let ps = sample_params();
        save_checkpoint(&p, "demo", &serde_json::Value::Null, &ps).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded.params.name(0), "fc.w");
        assert_eq!(loaded.params.name(1), "fc.b");
        assert_eq!(loaded.params.value(0).shape(), &[2, 3]);
    }

    #[test]
    fn truncation_and_count_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        let ps = sample_params();
        save_checkpoint(&p, "demo", &serde_json::Value::Null, &ps).unwrap();
        let full = fs::read(&p).unwrap();

        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &full[..full.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(StoreError::Truncated { .. })));

        let mut wrong = full.clone();
        let header_len = u32::from_le_bytes(wrong[0..4].try_into().unwrap()) as usize;
        let count_at = 4 + header_len;
        wrong[count_at..count_at + 4].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&cut, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(StoreError::BadArray { .. })));

        let mut padded = full;
        padded.push(0);
        fs::write(&cut, &padded).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(StoreError::Corrupt(_))));
    }
}
