//! Checkpoint serialization.
//!
//! Binary layout: the magic `CKPT1`, a u32 tensor count, then one
//! manifest record per tensor (u32 name length, UTF-8 name, u32 rank,
//! u32 dims) in sorted-name order, then every tensor's data as
//! row-major 64-bit little-endian floats in the same order. The config
//! travels alongside as a `key = value` text block in `<path>.cfg`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::store::{ParameterStore, Tensor};
use super::ModelError;

const MAGIC: &[u8; 5] = b"CKPT1";

/// Free-form metadata written next to the tensors. Values must be
/// single-line strings; anything richer belongs in an encoded value.
pub type CheckpointMeta = BTreeMap<String, String>;

/// Writes `<path>` (tensors) and `<path>.cfg` (metadata).
pub fn save_checkpoint(
    path: &Path,
    params: &ParameterStore,
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, tensor) in params.iter() {
        for &v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&out).map_err(io_err)?;

    let mut cfg = String::new();
    for (key, value) in meta {
        debug_assert!(!value.contains('\n'), "meta values must be single-line");
        cfg.push_str(&format!("{key} = {value}\n"));
    }
    let cfg_path = meta_path(path);
    fs::write(&cfg_path, cfg).map_err(|source| ModelError::Io {
        path: cfg_path,
        source,
    })
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".cfg");
    PathBuf::from(name)
}

/// Reads a checkpoint and its metadata sidecar back.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, CheckpointMeta), ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: &str| ModelError::BadCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < 9 || &bytes[0..5] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut at = 5;
    let take_u32 = |at: &mut usize| -> Result<u32, ModelError> {
        if *at + 4 > bytes.len() {
            return Err(bad("truncated manifest"));
        }
        let v = u32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap());
        *at += 4;
        Ok(v)
    };

    let n_tensors = take_u32(&mut at)? as usize;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = take_u32(&mut at)? as usize;
        if at + name_len > bytes.len() {
            return Err(bad("truncated name"));
        }
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        at += name_len;
        let rank = take_u32(&mut at)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut at)? as usize);
        }
        manifest.push((name, shape));
    }

    let total: usize = manifest
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    if bytes.len() != at + total * 8 {
        return Err(bad("data section has the wrong length"));
    }

    let mut store = ParameterStore::new();
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = bytes[at..at + len * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        at += len * 8;
        let tensor = Tensor::from_shape_vec(shape.as_slice(), data)
            .map_err(|_| bad("tensor shape does not match data"))?;
        store.insert(name, tensor);
    }

    let cfg_path = meta_path(path);
    let cfg = fs::read_to_string(&cfg_path).map_err(|source| ModelError::Io {
        path: cfg_path.clone(),
        source,
    })?;
    let mut meta = CheckpointMeta::new();
    for line in cfg.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ModelError::BadCheckpoint {
            path: cfg_path.clone(),
            reason: format!("bad meta line {line:?}"),
        })?;
        meta.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok((store, meta))
}
