//! Weight files: a JSON manifest plus a sidecar little-endian f32 blob.
//!
//! ```text
//! unet.json   {"format_version":1,"model_kind":"unet","config":{..},
//!              "blob":"unet.bin","blob_checksum":"sha256:<hex>",
//!              "tensors":[{"name":..,"shape":[..],"byte_offset":0},..]}
//! unet.bin    tensors back to back in manifest order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TextEncoder,
    Unet,
    Vae,
    Controlnet,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub config: serde_json::Value,
    pub blob: String,
    pub blob_checksum: String,
    pub tensors: Vec<TensorEntry>,
}

impl WeightManifest {
    /// Offsets ascending, non-overlapping and covering the blob exactly.
    pub fn check_layout(&self, blob_len: u64) -> Result<()> {
        let mut cursor = 0u64;
        for t in &self.tensors {
            if t.shape.is_empty() || t.shape.contains(&0) {
                return Err(Error::Weights(format!("tensor `{}` has invalid shape {:?}", t.name, t.shape)));
            }
            if t.byte_offset != cursor {
                return Err(Error::Weights(format!(
                    "tensor `{}` starts at byte {} but previous data ends at {cursor}",
                    t.name, t.byte_offset
                )));
            }
            cursor += 4 * t.shape.iter().product::<usize>() as u64;
        }
        if cursor != blob_len {
            return Err(Error::Weights(format!(
                "tensors cover {cursor} bytes but blob has {blob_len}"
            )));
        }
        Ok(())
    }
}

pub fn checksum(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(7 + 64);
    s.push_str("sha256:");
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// An in-memory weight file: kind, config and named tensors in order.
#[derive(Debug, Clone)]
pub struct WeightFile {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

impl WeightFile {
    pub fn blob_path(manifest_path: &Path) -> PathBuf {
        manifest_path.with_extension("bin")
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = Self::blob_path(manifest_path);
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                byte_offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = WeightManifest {
            format_version: FORMAT_VERSION,
            model_kind: self.kind,
            config: self.config.clone(),
            blob: blob_path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string(),
            blob_checksum: checksum(&blob),
            tensors: entries,
        };
        if let Some(dir) = manifest_path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&blob_path, &blob)?;
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: WeightManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Weights(format!(
                "{}: unknown format_version {} (supported: {FORMAT_VERSION})",
                manifest_path.display(),
                manifest.format_version
            )));
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = fs::read(&blob_path)?;
        let actual = checksum(&blob);
        if actual != manifest.blob_checksum {
            return Err(Error::Checksum {
                path: blob_path.display().to_string(),
                expected: manifest.blob_checksum,
                actual,
            });
        }
        manifest.check_layout(blob.len() as u64)?;
        let mut tensors = IndexMap::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.byte_offset as usize;
            let data = blob[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors
                .insert(entry.name.clone(), Tensor::new(&entry.shape, data)?)
                .is_some()
            {
                return Err(Error::Weights(format!("duplicate tensor `{}`", entry.name)));
            }
        }
        Ok(Self {
            kind: manifest.model_kind,
            config: manifest.config,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Weights(format!(
                "expected a {kind:?} weight file, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        let mut tensors = IndexMap::new();
        tensors.insert("a".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0));
        tensors.insert("b".into(), Tensor::from_fn(&[4], |i| (i as f32).sin()));
        WeightFile {
            kind: ModelKind::Lora,
            config: serde_json::json!({"rank": 4}),
            tensors,
        }
    }

    #[test]
    fn save_load_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let wf = sample();
        wf.save(&path).unwrap();
        let back = WeightFile::load(&path).unwrap();
        assert_eq!(back.kind, ModelKind::Lora);
        for (name, t) in &wf.tensors {
            assert!(t.bit_eq(&back.tensors[name]));
        }
        assert_eq!(back.param_count(), 10);
    }

    #[test]
    fn corrupt_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        sample().save(&path).unwrap();
        let blob = WeightFile::blob_path(&path);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(WeightFile::load(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        sample().save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        let err = WeightFile::load(&path).unwrap_err().to_string();
        assert!(err.contains("format_version 9"), "{err}");
    }

    #[test]
    fn layout_gaps_rejected() {
        let m = WeightManifest {
            format_version: 1,
            model_kind: ModelKind::Vae,
            config: serde_json::Value::Null,
            blob: "x.bin".into(),
            blob_checksum: String::new(),
            tensors: vec![
                TensorEntry { name: "a".into(), shape: vec![2], byte_offset: 0 },
                TensorEntry { name: "b".into(), shape: vec![2], byte_offset: 12 },
            ],
        };
        assert!(m.check_layout(20).is_err());
        assert!(m.check_layout(16).is_err());
    }
}
