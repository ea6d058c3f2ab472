//! Checkpoint container.
//!
//! A checkpoint is a directory holding two files:
//!
//! * `manifest.json` with the architecture name and layout, `embed_dim`,
//!   `n_classes`, the config hash, the epoch counter, the score scale and the
//!   generator state;
//! * `params.bin` with every parameter array, head weights last.
//!
//! `params.bin` layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DFAPARAM"
//! version    u32      1
//! count      u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8       1 = f64
//!   ndim     u32, dims (ndim × u64)
//!   data     prod(dims) × f64 (IEEE-754 binary64, little-endian)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Architecture, FeatureExtractor, ModelSnapshot, Param};
use crate::error::{DfaError, Result};
use crate::head::OrthogonalHead;
use crate::rng::RngState;

const MAGIC: &[u8; 8] = b"DFAPARAM";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
pub const HEAD_PARAM: &str = "head.weight";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub architecture_name: String,
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub config_hash: String,
    pub epoch: usize,
    pub score_scale: f64,
    pub rng_state: Option<RngState>,
    /// Free-form run name, e.g. the training mode.
    #[serde(default)]
    pub label: String,
}

pub fn save(snapshot: &ModelSnapshot, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DfaError::io(dir, e))?;
    let manifest = Manifest {
        architecture_name: snapshot.extractor.architecture().name().to_string(),
        architecture: snapshot.extractor.architecture().clone(),
        embed_dim: snapshot.extractor.embed_dim(),
        n_classes: snapshot.n_classes(),
        config_hash: snapshot.config_hash.clone(),
        epoch: snapshot.epoch,
        score_scale: snapshot.score_scale,
        rng_state: snapshot.rng_state,
        label: snapshot.label.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| DfaError::io(&manifest_path, e))?;

    let head = snapshot.head.weights();
    let head_param = Param {
        name: HEAD_PARAM.to_string(),
        shape: vec![head.nrows(), head.ncols()],
        value: head.iter().copied().collect(),
    };
    let arrays: Vec<&Param> = snapshot.extractor.params().iter().chain(std::iter::once(&head_param)).collect();
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, encode_params(&arrays)).map_err(|e| DfaError::io(&params_path, e))
}

pub fn load(dir: &Path) -> Result<ModelSnapshot> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| DfaError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| DfaError::io(&params_path, e))?;
    let mut arrays = decode_params(&bytes, &params_path)?;

    let head = arrays
        .pop()
        .filter(|p| p.name == HEAD_PARAM)
        .ok_or_else(|| DfaError::Checkpoint(format!("last array must be `{HEAD_PARAM}`")))?;
    if head.shape != [manifest.n_classes, manifest.embed_dim] {
        return Err(DfaError::Checkpoint(format!(
            "head shape {:?} disagrees with manifest ({}, {})",
            head.shape, manifest.n_classes, manifest.embed_dim
        )));
    }
    let weights = Array2::from_shape_vec((head.shape[0], head.shape[1]), head.value)
        .map_err(|e| DfaError::Checkpoint(e.to_string()))?;
    let head = OrthogonalHead::from_weights(weights)?;

    let mut extractor = FeatureExtractor::build(manifest.architecture.clone())?;
    if extractor.params().len() != arrays.len() {
        return Err(DfaError::Checkpoint(format!(
            "architecture expects {} arrays, file has {}",
            extractor.params().len(),
            arrays.len()
        )));
    }
    for (slot, array) in extractor.params_mut().iter_mut().zip(arrays) {
        if slot.name != array.name || slot.shape != array.shape {
            return Err(DfaError::Checkpoint(format!(
                "expected `{}` {:?}, found `{}` {:?}",
                slot.name, slot.shape, array.name, array.shape
            )));
        }
        slot.value = array.value;
    }
    let mut snapshot = ModelSnapshot::new(extractor, head, manifest.score_scale)?;
    snapshot.config_hash = manifest.config_hash;
    snapshot.epoch = manifest.epoch;
    snapshot.rng_state = manifest.rng_state;
    snapshot.label = manifest.label;
    Ok(snapshot)
}

pub fn encode_params(arrays: &[&Param]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for p in arrays {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DfaError::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail(&self, reason: impl Into<String>) -> DfaError {
        DfaError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<Vec<Param>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(DfaError::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("array count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.fail("array name is not UTF-8"))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(r.fail(format!("unsupported dtype code {dtype}")));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.fail("array size overflows"))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| r.fail("array size overflows"))?, "array data")?;
        let value = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(Param { name, shape, value });
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last array"));
    }
    Ok(arrays)
}
