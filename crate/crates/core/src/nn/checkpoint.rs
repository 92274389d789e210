//! Checkpoints: a flat little-endian `f64` blob plus a JSON manifest that
//! names every array, its shape and its offset into the blob.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NamedArray;
use crate::error::{Error, Result};

pub const FORMAT: &str = "scnfusion-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes).
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub arrays: Vec<ArrayEntry>,
    pub total_values: usize,
    pub blob_sha256: String,
    /// Caller-defined metadata (model config, seed, epoch, ...).
    pub meta: serde_json::Value,
}

pub fn encode(arrays: &[NamedArray<'_>], meta: serde_json::Value) -> (Vec<u8>, Manifest) {
    let total: usize = arrays.iter().map(|a| a.values.len()).sum();
    let mut blob = vec![0u8; total * 8];
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for a in arrays {
        LittleEndian::write_f64_into(
            a.values,
            &mut blob[offset * 8..(offset + a.values.len()) * 8],
        );
        entries.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            offset,
        });
        offset += a.values.len();
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        arrays: entries,
        total_values: total,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        meta,
    };
    (blob, manifest)
}

/// Checks the manifest against the expected array layout and the blob,
/// returning the decoded arrays in manifest order.
pub fn decode(
    blob: &[u8],
    manifest: &Manifest,
    expected: &[(String, Vec<usize>)],
) -> Result<Vec<Vec<f64>>> {
    if manifest.format != FORMAT {
        return Err(Error::ArtifactMismatch(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    if blob.len() != manifest.total_values * 8 {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint blob has {} bytes, manifest promises {}",
            blob.len(),
            manifest.total_values * 8
        )));
    }
    if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(Error::ArtifactMismatch(
            "checkpoint blob checksum mismatch".into(),
        ));
    }
    if manifest.arrays.len() != expected.len() {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint has {} arrays, model expects {}",
            manifest.arrays.len(),
            expected.len()
        )));
    }
    let mut out = Vec::with_capacity(expected.len());
    let mut next = 0;
    for (entry, (name, shape)) in manifest.arrays.iter().zip(expected) {
        if &entry.name != name || &entry.shape != shape || entry.offset != next {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint array {} {:?} does not match model array {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let len: usize = shape.iter().product();
        let end = next + len;
        if end > manifest.total_values {
            return Err(Error::ArtifactMismatch(
                "checkpoint arrays overrun the blob".into(),
            ));
        }
        let mut values = vec![0.0; len];
        LittleEndian::read_f64_into(&blob[next * 8..end * 8], &mut values);
        out.push(values);
        next = end;
    }
    if next != manifest.total_values {
        return Err(Error::ArtifactMismatch(
            "checkpoint blob has trailing values".into(),
        ));
    }
    Ok(out)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save(stem: &Path, blob: &[u8], manifest: &Manifest) -> Result<()> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    std::fs::write(&bin, blob).map_err(|e| Error::from(e).in_file(&bin))?;
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&json, text).map_err(|e| Error::from(e).in_file(&json))
}

pub fn load(stem: &Path) -> Result<(Vec<u8>, Manifest)> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let text = std::fs::read_to_string(&json).map_err(|e| Error::from(e).in_file(&json))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(&json))?;
    let blob = std::fs::read(&bin).map_err(|e| Error::from(e).in_file(&bin))?;
    Ok((blob, manifest))
}
