//! Binary tensor files.
//!
//! Layout: the magic `DCSSTNSR`, a little-endian `u64` header length, a JSON
//! header, then every tensor's values as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use dcss_core::optim::{Adam, AdamMoments, Sgd};
use dcss_core::{ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 8] = b"DCSSTNSR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ParamKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

pub struct TensorFile {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn encode(header: &Header, tensors: &[&Tensor]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let values: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> CliResult<TensorFile> {
    let bad = |m: &str| CliError::io(path, format!("not a tensor file ({m})"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut at = 16 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(at..at + 8 * n).ok_or_else(|| bad("truncated data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor::new(&entry.shape, data).map_err(|e| bad(&e.to_string()))?);
        at += 8 * n;
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(TensorFile { header, tensors })
}

pub fn read(path: &Path) -> CliResult<TensorFile> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(path, &bytes)
}

/// Parameter tensors in creation order, so that a reload rebuilds an
/// identical store.
pub fn save_store(path: &Path, store: &ParamStore, meta: Value) -> CliResult<()> {
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in store.iter() {
        entries.push(TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), dtype: "f64".into(), kind: Some(p.kind) });
        tensors.push(&p.tensor);
    }
    let header = Header { version: 1, seed: store.seed(), meta, tensors: entries };
    write_atomic(path, &encode(&header, &tensors))
}

pub fn load_store(path: &Path) -> CliResult<(ParamStore, Value)> {
    let file = read(path)?;
    let mut store = ParamStore::new(file.header.seed);
    for (entry, tensor) in file.header.tensors.iter().zip(file.tensors) {
        let kind = entry.kind.ok_or_else(|| CliError::io(path, format!("tensor {} has no kind", entry.name)))?;
        store.insert(&entry.name, kind, tensor);
    }
    Ok((store, file.header.meta))
}

/// Momentum buffers and Adam moments, keyed by parameter name.
pub fn save_optimizers(path: &Path, sgd: &Sgd, adam: &Adam) -> CliResult<()> {
    let mut entries = Vec::new();
    let mut owned = Vec::new();
    for (name, v) in sgd.state() {
        entries.push(TensorEntry { name: format!("sgd.velocity/{name}"), shape: vec![v.len()], dtype: "f64".into(), kind: None });
        owned.push(Tensor::new(&[v.len()], v.clone()).expect("flat"));
    }
    let mut steps = serde_json::Map::new();
    for (name, m) in adam.state() {
        for (tag, buf) in [("m", &m.m), ("v", &m.v)] {
            entries.push(TensorEntry { name: format!("adam.{tag}/{name}"), shape: vec![buf.len()], dtype: "f64".into(), kind: None });
            owned.push(Tensor::new(&[buf.len()], buf.clone()).expect("flat"));
        }
        steps.insert(name.clone(), Value::from(m.step));
    }
    let header = Header { version: 1, seed: 0, meta: serde_json::json!({ "adam_steps": steps }), tensors: entries };
    let refs: Vec<&Tensor> = owned.iter().collect();
    write_atomic(path, &encode(&header, &refs))
}

pub fn load_optimizers(path: &Path, sgd: &mut Sgd, adam: &mut Adam) -> CliResult<()> {
    let file = read(path)?;
    let steps = file.header.meta.get("adam_steps").and_then(Value::as_object).cloned().unwrap_or_default();
    let mut velocity = std::collections::BTreeMap::new();
    let mut moments: std::collections::BTreeMap<String, AdamMoments> = std::collections::BTreeMap::new();
    for (entry, t) in file.header.tensors.iter().zip(file.tensors) {
        let data = t.into_data();
        if let Some(name) = entry.name.strip_prefix("sgd.velocity/") {
            velocity.insert(name.to_string(), data);
        } else if let Some(name) = entry.name.strip_prefix("adam.m/") {
            moments.entry(name.to_string()).or_default().m = data;
        } else if let Some(name) = entry.name.strip_prefix("adam.v/") {
            moments.entry(name.to_string()).or_default().v = data;
        } else {
            return Err(CliError::io(path, format!("unexpected optimizer tensor {}", entry.name)));
        }
    }
    for (name, m) in moments.iter_mut() {
        m.step = steps
            .get(name)
            .and_then(Value::as_u64)
            .ok_or_else(|| CliError::io(path, format!("missing Adam step count for {name}")))?;
    }
    sgd.set_state(velocity);
    adam.set_state(moments);
    Ok(())
}
