//! JSON checkpoints of named tensors.
//!
//! Layout: `{"format_version":1,"tensors":{name:{"shape":[..],"data_b64":..}}}`
//! where `data_b64` is the base64 encoding of little-endian `f64` values.
//! Tensor names are kept sorted so identical models serialise to identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format_version: u64,
    tensors: BTreeMap<String, Entry>,
}

pub fn encode(tensors: &TensorMap) -> Result<String> {
    let doc = Document {
        format_version: FORMAT_VERSION,
        tensors: tensors
            .iter()
            .map(|(name, t)| {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (
                    name.clone(),
                    Entry {
                        shape: t.shape().to_vec(),
                        data_b64: STANDARD.encode(bytes),
                    },
                )
            })
            .collect(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn decode(text: &str) -> Result<TensorMap> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(format!("invalid JSON: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptCheckpoint("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let doc: Document = serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    doc.tensors
        .into_iter()
        .map(|(name, e)| {
            let bytes = STANDARD
                .decode(&e.data_b64)
                .map_err(|err| Error::CorruptCheckpoint(format!("`{name}`: {err}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::CorruptCheckpoint(format!("`{name}`: byte length {} not a multiple of 8", bytes.len())));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| Error::CorruptCheckpoint(format!("`{name}`: {err}")))?;
            Ok((name, t))
        })
        .collect()
}

pub fn save(tensors: &TensorMap, path: &Path) -> Result<()> {
    fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TensorMap> {
    decode(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
