//! Binary episode files.
//!
//! Layout: magic `RGEP` (4 bytes), format version u32 LE, header length
//! u32 LE, UTF-8 JSON header, then the array payloads concatenated in
//! directory order, row-major, little-endian.  The header carries the
//! array directory (name, dtype, shape) plus the instruction text,
//! category tag, target ids, scene JSON, and episode seed.
//!
//! Arrays are fixed: images `[T,H,W,3]` u8, mask_obj `[T,H,W]` u8,
//! mask_plc `[T,H,W]` u8, states `[T,4]` f32, actions `[T,3]` f32.
//! Images quantize [0,1] to 0..255 with round-half-even; readers
//! dequantize by dividing by 255.

use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{read_exact_vec, read_u32, StoreError};

pub const EPISODE_MAGIC: [u8; 4] = *b"RGEP";
pub const EPISODE_VERSION: u32 = 1;

/// Quantize a unit-interval intensity to a byte, ties to even.
pub fn quantize_unit(x: f64) -> u8 {
    (x * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
}

/// Inverse of [`quantize_unit`] up to quantization error.
pub fn dequantize_unit(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// One recorded trajectory with its instruction and scene provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub instruction: String,
    /// Instruction category tag (easy, appearance, spatial, commonsense).
    pub category: String,
    pub target_object_id: u32,
    pub region_id: u32,
    /// Initial scene, as its canonical JSON value.
    pub scene: serde_json::Value,
    pub seed: u64,
    /// `[T, H, W, 3]` quantized frames.
    pub images: Array4<u8>,
    /// `[T, H, W]` target-object masks.
    pub mask_obj: Array3<u8>,
    /// `[T, H, W]` placement masks.
    pub mask_plc: Array3<u8>,
    /// `[T, 4]` proprioception per frame.
    pub states: Array2<f32>,
    /// `[T, 3]` executed actions: (dx, dy, grip).
    pub actions: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeHeader {
    arrays: Vec<ArrayEntry>,
    instruction: String,
    category: String,
    target_object_id: u32,
    region_id: u32,
    scene: serde_json::Value,
    seed: u64,
}

const DIRECTORY: [(&str, &str); 5] = [
    ("images", "u8"),
    ("mask_obj", "u8"),
    ("mask_plc", "u8"),
    ("states", "f32"),
    ("actions", "f32"),
];

fn bad(name: &str, problem: String) -> StoreError {
    StoreError::BadArray {
        name: name.to_string(),
        problem,
    }
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.images.dim().0
    }

    pub fn resolution(&self) -> usize {
        self.images.dim().1
    }

    fn check_shapes(&self) -> Result<(), StoreError> {
        let (t, h, w, c) = self.images.dim();
        if h != w || c != 3 {
            return Err(bad("images", format!("shape [{t},{h},{w},{c}], want [T,H,H,3]")));
        }
        for (name, dim) in [("mask_obj", self.mask_obj.dim()), ("mask_plc", self.mask_plc.dim())] {
            if dim != (t, h, w) {
                return Err(bad(name, format!("shape {dim:?}, want ({t},{h},{w})")));
            }
        }
        if self.states.dim() != (t, 4) {
            return Err(bad("states", format!("shape {:?}, want ({t},4)", self.states.dim())));
        }
        if self.actions.dim() != (t, 3) {
            return Err(bad("actions", format!("shape {:?}, want ({t},3)", self.actions.dim())));
        }
        Ok(())
    }

    fn header(&self) -> EpisodeHeader {
        let shapes = [
            self.images.shape().to_vec(),
            self.mask_obj.shape().to_vec(),
            self.mask_plc.shape().to_vec(),
            self.states.shape().to_vec(),
            self.actions.shape().to_vec(),
        ];
        EpisodeHeader {
            arrays: DIRECTORY
                .iter()
                .zip(shapes)
                .map(|(&(name, dtype), shape)| ArrayEntry {
                    name: name.to_string(),
                    dtype: dtype.to_string(),
                    shape,
                })
                .collect(),
            instruction: self.instruction.clone(),
            category: self.category.clone(),
            target_object_id: self.target_object_id,
            region_id: self.region_id,
            scene: self.scene.clone(),
            seed: self.seed,
        }
    }
}

pub fn write_episode(path: &Path, episode: &Episode) -> Result<(), StoreError> {
    episode.check_shapes()?;
    let header = serde_json::to_string(&episode.header())?;
    let mut bytes = Vec::with_capacity(12 + header.len() + episode.images.len());
    bytes.extend_from_slice(&EPISODE_MAGIC);
    bytes.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend(episode.images.iter());
    bytes.extend(episode.mask_obj.iter());
    bytes.extend(episode.mask_plc.iter());
    for &v in &episode.states {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &episode.actions {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn take_u8(bytes: &[u8], pos: &mut usize, shape: &[usize]) -> Result<Vec<u8>, StoreError> {
    let n: usize = shape.iter().product();
    read_exact_vec(bytes, pos, n)
}

fn take_f32(bytes: &[u8], pos: &mut usize, shape: &[usize]) -> Result<Vec<f32>, StoreError> {
    let n: usize = shape.iter().product();
    let raw = read_exact_vec(bytes, pos, n * 4)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn expect_rank(entry: &ArrayEntry, rank: usize) -> Result<(), StoreError> {
    if entry.shape.len() != rank {
        return Err(bad(
            &entry.name,
            format!("rank {}, want {rank}", entry.shape.len()),
        ));
    }
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode, StoreError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let magic: [u8; 4] = read_exact_vec(&bytes, &mut pos, 4)?.try_into().unwrap();
    if magic != EPISODE_MAGIC {
        return Err(StoreError::BadMagic {
            expected: EPISODE_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&bytes, &mut pos)?;
    if version != EPISODE_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let header_len = read_u32(&bytes, &mut pos)? as usize;
    let header_raw = read_exact_vec(&bytes, &mut pos, header_len)?;
    let header: EpisodeHeader = serde_json::from_slice(&header_raw)?;

    if header.arrays.len() != DIRECTORY.len() {
        return Err(StoreError::Corrupt(format!(
            "directory lists {} arrays, want {}",
            header.arrays.len(),
            DIRECTORY.len()
        )));
    }
    for (entry, &(name, dtype)) in header.arrays.iter().zip(&DIRECTORY) {
        if entry.name != name {
            return Err(StoreError::Corrupt(format!(
                "directory entry {:?}, want {name:?}",
                entry.name
            )));
        }
        if entry.dtype != dtype {
            return Err(StoreError::DtypeMismatch {
                name: name.to_string(),
                expected: dtype.to_string(),
                found: entry.dtype.clone(),
            });
        }
    }
    let [images_e, mask_obj_e, mask_plc_e, states_e, actions_e] = &header.arrays[..] else {
        unreachable!("length checked above");
    };
    expect_rank(images_e, 4)?;
    expect_rank(mask_obj_e, 3)?;
    expect_rank(mask_plc_e, 3)?;
    expect_rank(states_e, 2)?;
    expect_rank(actions_e, 2)?;

    let images_raw = take_u8(&bytes, &mut pos, &images_e.shape)?;
    let mask_obj_raw = take_u8(&bytes, &mut pos, &mask_obj_e.shape)?;
    let mask_plc_raw = take_u8(&bytes, &mut pos, &mask_plc_e.shape)?;
    let states_raw = take_f32(&bytes, &mut pos, &states_e.shape)?;
    let actions_raw = take_f32(&bytes, &mut pos, &actions_e.shape)?;
    if pos != bytes.len() {
        return Err(StoreError::Corrupt(format!(
            "{} trailing bytes after payloads",
            bytes.len() - pos
        )));
    }

    let dim4 = |s: &[usize]| (s[0], s[1], s[2], s[3]);
    let dim3 = |s: &[usize]| (s[0], s[1], s[2]);
    let dim2 = |s: &[usize]| (s[0], s[1]);
    let episode = Episode {
        instruction: header.instruction,
        category: header.category,
        target_object_id: header.target_object_id,
        region_id: header.region_id,
        scene: header.scene,
        seed: header.seed,
        images: Array4::from_shape_vec(dim4(&images_e.shape), images_raw)
            .map_err(|e| bad("images", e.to_string()))?,
        mask_obj: Array3::from_shape_vec(dim3(&mask_obj_e.shape), mask_obj_raw)
            .map_err(|e| bad("mask_obj", e.to_string()))?,
        mask_plc: Array3::from_shape_vec(dim3(&mask_plc_e.shape), mask_plc_raw)
            .map_err(|e| bad("mask_plc", e.to_string()))?,
        states: Array2::from_shape_vec(dim2(&states_e.shape), states_raw)
            .map_err(|e| bad("states", e.to_string()))?,
        actions: Array2::from_shape_vec(dim2(&actions_e.shape), actions_raw)
            .map_err(|e| bad("actions", e.to_string()))?,
    };
    episode.check_shapes()?;
    Ok(episode)
}
