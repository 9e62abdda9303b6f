//! Parameter persistence: `manifest.json` plus raw little-endian `f32` blobs,
//! one blob per top-level name prefix.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{Params, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `blob`.
    pub offset: usize,
    pub blob: String,
}

fn blob_name(param: &str) -> String {
    let head = param.split('.').next().unwrap_or(param);
    format!("{head}.bin")
}

/// Writes every parameter as `f32`. Values off the `f32` grid are rounded.
pub fn save_checkpoint(params: &Params, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut manifest = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let blob = blob_name(name);
        let buf = blobs.entry(blob.clone()).or_default();
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: buf.len(),
            blob,
        });
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for (blob, bytes) in &blobs {
        let path = dir.join(blob);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corruption {
        param: MANIFEST.into(),
        reason: e.to_string(),
    })
}

fn load_filtered(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Params> {
    let manifest = read_manifest(dir)?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut out = Params::new();
    for e in manifest.iter().filter(|e| keep(&e.name)) {
        let corrupt = |reason: String| Error::Corruption {
            param: e.name.clone(),
            reason,
        };
        if e.dtype != "f32" {
            return Err(corrupt(format!("dtype `{}` is not f32", e.dtype)));
        }
        if e.blob.contains(['/', '\\']) || e.blob.starts_with('.') {
            return Err(corrupt(format!("blob name `{}` leaves the checkpoint directory", e.blob)));
        }
        if out.contains(&e.name) {
            return Err(corrupt("listed twice".into()));
        }
        if !blobs.contains_key(&e.blob) {
            let path = dir.join(&e.blob);
            let bytes = std::fs::read(&path).map_err(|err| corrupt(format!("blob {}: {err}", path.display())))?;
            blobs.insert(e.blob.clone(), bytes);
        }
        let bytes = &blobs[&e.blob];
        let numel: usize = e.shape.iter().product();
        let end = e.offset.checked_add(4 * numel).filter(|&end| end <= bytes.len()).ok_or_else(|| {
            corrupt(format!(
                "needs bytes {}..{} of `{}`, which holds {}",
                e.offset,
                e.offset + 4 * numel,
                e.blob,
                bytes.len()
            ))
        })?;
        let data: Vec<f64> = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite value".into()));
        }
        out.insert(e.name.clone(), Tensor::new(&e.shape, data).map_err(|err| corrupt(err.to_string()))?);
    }
    Ok(out)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Params> {
    load_filtered(dir.as_ref(), |_| true)
}

/// Overwrites the parameters of `into` whose names start with `prefix` with
/// the checkpoint's values. Nothing outside the prefix is read or touched.
/// Returns the number of parameters replaced.
pub fn load_subtree(dir: impl AsRef<Path>, prefix: &str, into: &mut Params) -> Result<usize> {
    let loaded = load_filtered(dir.as_ref(), |n| n.starts_with(prefix))?;
    for (name, t) in loaded.iter() {
        let slot = into.get(name).map_err(|_| Error::Corruption {
            param: name.clone(),
            reason: "not present in the target model".into(),
        })?;
        if slot.shape() != t.shape() {
            return Err(Error::Corruption {
                param: name.clone(),
                reason: format!("shape {:?} does not match model {:?}", t.shape(), slot.shape()),
            });
        }
    }
    let n = loaded.len();
    into.extend(loaded);
    Ok(n)
}
