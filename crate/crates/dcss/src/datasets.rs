//! Dataset split files and their manifest.
//!
//! Each split file is the magic `DCSSDATA`, a little-endian `u64` header
//! length, a JSON header, then per sample `3·H·W` image bytes (value × 255)
//! followed by `H·W` label bytes.

use std::fs;
use std::path::Path;

use dcss_core::data::{generate, Dataset, DatasetSpec, SegSample};
use dcss_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::tensors::write_atomic;

const MAGIC: &[u8; 8] = b"DCSSDATA";
pub const SPLITS: [&str; 3] = ["trainA", "trainB", "val"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitHeader {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub split: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub splits: Vec<SplitEntry>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_split(spec: &DatasetSpec, split: &str, samples: &[SegSample]) -> Vec<u8> {
    let header = SplitHeader { spec: spec.clone(), seed: spec.seed, split: split.into(), count: samples.len() };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for s in samples {
        out.extend(s.image.data().iter().map(|&v| (v * 255.0).round() as u8));
        out.extend_from_slice(&s.label);
    }
    out
}

pub fn decode_split(path: &Path, bytes: &[u8]) -> CliResult<(SplitHeader, Vec<SegSample>)> {
    let bad = |m: &str| CliError::io(path, format!("not a dataset split ({m})"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: SplitHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let (h, w) = (header.spec.height, header.spec.width);
    let per = 4 * h * w;
    let data = &bytes[16 + len..];
    if data.len() != per * header.count {
        return Err(bad("sample data has the wrong length"));
    }
    let samples = data
        .chunks_exact(per)
        .map(|chunk| {
            let image = chunk[..3 * h * w].iter().map(|&b| b as f64 / 255.0).collect();
            SegSample { image: Tensor::new(&[3, h, w], image).expect("sized"), label: chunk[3 * h * w..].to_vec() }
        })
        .collect();
    Ok((header, samples))
}

/// Generates the dataset and writes the three split files plus the manifest.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> CliResult<Manifest> {
    let data = generate(spec)?;
    let mut entries = Vec::new();
    for (name, samples) in SPLITS.iter().zip([&data.train_a, &data.train_b, &data.val]) {
        let bytes = encode_split(spec, name, samples);
        let file = format!("{name}.bin");
        write_atomic(&dir.join(&file), &bytes)?;
        entries.push(SplitEntry { name: name.to_string(), file, count: samples.len(), sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest { spec: spec.clone(), splits: entries };
    write_atomic(&dir.join(MANIFEST), &crate::to_json_bytes(&manifest))?;
    Ok(manifest)
}

/// Loads a materialized dataset, checking every split against its hash.
pub fn read_dataset(dir: &Path) -> CliResult<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| CliError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| CliError::io(&mpath, e))?;
    let mut splits = Vec::new();
    for name in SPLITS {
        let entry = manifest
            .splits
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CliError::io(&mpath, format!("split {name} missing")))?;
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(CliError::io(&path, "checksum does not match the manifest"));
        }
        let (header, samples) = decode_split(&path, &bytes)?;
        if header.spec != manifest.spec || samples.len() != entry.count {
            return Err(CliError::io(&path, "header disagrees with the manifest"));
        }
        for s in &samples {
            s.validate(manifest.spec.num_classes)?;
        }
        splits.push(samples);
    }
    let val = splits.pop().expect("three splits");
    let train_b = splits.pop().expect("three splits");
    let train_a = splits.pop().expect("three splits");
    Ok(Dataset { spec: manifest.spec, train_a, train_b, val })
}
