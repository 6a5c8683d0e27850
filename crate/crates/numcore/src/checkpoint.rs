//! Parameter checkpoints: a JSON manifest plus raw little-endian `f64`
//! values, stored side by side in one directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{NumError, ParamStore, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALUES_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the values file, counted in values (not bytes).
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of a serialized model config.
pub fn config_hash(config: &str) -> String {
    Sha256::digest(config.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(dir: &Path, params: &ParamStore, config: &str) -> Result<Manifest, NumError> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(params.num_values() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (_, p) in params.iter() {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
        for &x in p.value.data() {
            #[allow(clippy::unnecessary_cast)] // Real is f32 under the `f32` feature
            bytes.extend_from_slice(&(x as f64).to_le_bytes());
        }
        offset += p.value.len();
    }
    let manifest =
        Manifest { format_version: FORMAT_VERSION, dtype: "f64-le".into(), config_hash: config_hash(config), tensors };
    fs::write(dir.join(VALUES_FILE), bytes)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| NumError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, NumError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| NumError::Format(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(NumError::Format(format!("unsupported checkpoint format version {}", m.format_version)));
    }
    Ok(m)
}

/// Loads values into `params`, whose layout (names and shapes) must match
/// the checkpoint exactly. When `config` is given its hash must match too.
pub fn load_into(dir: &Path, params: &mut ParamStore, config: Option<&str>) -> Result<Manifest, NumError> {
    let m = read_manifest(dir)?;
    if let Some(c) = config {
        let h = config_hash(c);
        if h != m.config_hash {
            return Err(NumError::Format(format!("config hash mismatch: checkpoint {} vs {}", m.config_hash, h)));
        }
    }
    let bytes = fs::read(dir.join(VALUES_FILE))?;
    if m.tensors.len() != params.len() {
        return Err(NumError::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            m.tensors.len(),
            params.len()
        )));
    }
    for (entry, p) in m.tensors.iter().zip(params.iter_mut()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(NumError::Format(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        let start = entry.offset * 8;
        let end = start + n * 8;
        if end > bytes.len() {
            return Err(NumError::Format(format!("values file truncated at tensor {}", entry.name)));
        }
        let data: Vec<Real> = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
            .collect();
        p.value = Tensor::from_vec(&entry.shape, data)?;
    }
    Ok(m)
}
