//! Checkpoint files: `"SCKP"`, a u64 LE header length, a JSON header that
//! indexes the tensors, then the tensors' STNS encodings back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub step: usize,
    /// Tasks whose losses were optimized while producing these weights.
    pub trained_seg: bool,
    pub trained_attrs: bool,
    pub label_names: Vec<String>,
    pub attr_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    trainable: bool,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

pub fn to_bytes(meta: &CheckpointMeta, store: &ParamStore) -> Vec<u8> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        let bytes = p.value.to_stns_bytes();
        tensors.push(Entry { name: name.clone(), trainable: p.trainable, offset: blobs.len(), len: bytes.len() });
        blobs.extend_from_slice(&bytes);
    }
    let header = serde_json::to_vec(&Header { version: VERSION, meta: meta.clone(), tensors }).expect("serializable");
    let mut out = Vec::with_capacity(12 + header.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blobs);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore)> {
    let bad = |msg: &str| Error::Version(format!("unreadable checkpoint: {msg}"));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(12..).ok_or_else(|| bad("truncated"))?;
    let header_bytes = body.get(..len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(&e.to_string()))?;
    if header.version != VERSION {
        return Err(Error::Version(format!("checkpoint version {} (expected {VERSION})", header.version)));
    }
    let blobs = &body[len..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let blob = blobs.get(e.offset..e.offset + e.len).ok_or_else(|| bad("tensor outside file"))?;
        store.insert(e.name, Tensor::from_stns_bytes(blob)?, e.trainable);
    }
    Ok((header.meta, store))
}

pub fn save(path: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<()> {
    fs::write(path, to_bytes(meta, store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ParamStore)> {
    from_bytes(&fs::read(path)?)
}

/// Copies every `trunk.*` tensor of `src` into `dst`; shapes must agree.
pub fn copy_trunk(src: &ParamStore, dst: &mut ParamStore) -> Result<usize> {
    let mut copied = 0;
    for (name, p) in src.iter().filter(|(n, _)| n.starts_with("trunk.")) {
        let target = dst
            .get_mut(name)
            .map_err(|_| Error::Version(format!("checkpoint tensor `{name}` has no counterpart in this model")))?;
        if target.shape() != p.value.shape() {
            return Err(Error::Version(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                p.value.shape(),
                target.shape()
            )));
        }
        *target = p.value.clone();
        copied += 1;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, Variant};

    fn meta(v: Variant) -> CheckpointMeta {
        CheckpointMeta {
            model: ModelConfig::new(v, 3, 4, 16, 16),
            step: 7,
            trained_seg: true,
            trained_attrs: false,
            label_names: vec![],
            attr_names: vec![],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = meta(Variant::Sa);
        let store = Model::new(m.model.clone()).unwrap().init(4);
        let bytes = to_bytes(&m, &store);
        let (m2, s2) = from_bytes(&bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(s2, store);
        assert_eq!(to_bytes(&m2, &s2), bytes);
    }

    #[test]
    fn trunk_shape_mismatch_is_version_error() {
        let src = Model::new(meta(Variant::NaiveConcat).model).unwrap().init(1);
        let mut dst = Model::new(meta(Variant::BaselineGap).model).unwrap().init(1);
        assert!(matches!(copy_trunk(&src, &mut dst), Err(Error::Version(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(from_bytes(b"nope"), Err(Error::Version(_))));
    }
}
