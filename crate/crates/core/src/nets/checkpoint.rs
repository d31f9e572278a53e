//! Parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! FLOWDISTILL-CKPT 1\n
//! <manifest byte length>\n
//! <manifest: pretty-printed JSON>
//! <blob: little-endian f32 values, entries back to back in manifest order>
//! ```
//!
//! Each manifest entry records the name, shape, element count and byte offset
//! of one parameter array inside the blob. Values are written at `f32`
//! precision; parameters produced by this crate are already storage-rounded,
//! so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &str = "FLOWDISTILL-CKPT 1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config_hash: Option<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    entries: Vec<ManifestEntry>,
}

/// A parameter set plus the provenance stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: Option<String>,
    pub metadata: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, params: ParamSet) -> Self {
        Self {
            kind: kind.into(),
            config_hash: None,
            metadata: BTreeMap::new(),
            params,
        }
    }

    pub fn with_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn manifest_entries(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    count: t.data.len(),
                    offset,
                };
                offset += 4 * t.data.len();
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            metadata: self.metadata.clone(),
            entries: self.manifest_entries(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::InvalidArgument(format!("manifest: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(format!("{}\n", text.len()).as_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in self.params.values() {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let (magic, rest) = split_line(bytes).ok_or_else(|| corrupt("missing header"))?;
        if magic != MAGIC.as_bytes() {
            return Err(corrupt("bad magic"));
        }
        let (len_line, rest) = split_line(rest).ok_or_else(|| corrupt("missing manifest length"))?;
        let len: usize = std::str::from_utf8(len_line)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| corrupt("unreadable manifest length"))?;
        if rest.len() < len {
            return Err(corrupt("truncated manifest"));
        }
        let (text, blob) = rest.split_at(len);
        let manifest: Manifest = serde_json::from_slice(text)
            .map_err(|e| corrupt(&format!("unreadable manifest: {e}")))?;

        let mut params = ParamSet::new();
        let mut expected_offset = 0;
        for e in &manifest.entries {
            if e.shape.iter().product::<usize>() != e.count {
                return Err(Error::shape(
                    format!("{} elements for `{}` {:?}", e.shape.iter().product::<usize>(), e.name, e.shape),
                    format!("{} elements", e.count),
                ));
            }
            if e.offset != expected_offset {
                return Err(corrupt(&format!("entry `{}` has offset {} (expected {expected_offset})", e.name, e.offset)));
            }
            let end = e.offset + 4 * e.count;
            if end > blob.len() {
                return Err(corrupt(&format!("truncated blob while reading `{}`", e.name)));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if params
                .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
                .is_some()
            {
                return Err(corrupt(&format!("duplicate entry `{}`", e.name)));
            }
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(corrupt("trailing bytes after blob"));
        }
        Ok(Self {
            kind: manifest.kind,
            config_hash: manifest.config_hash,
            metadata: manifest.metadata,
            params,
        })
    }

    /// Fail unless the checkpoint carries `expected` as its config hash.
    pub fn require_hash(&self, expected: &str, path: &Path) -> Result<()> {
        match &self.config_hash {
            Some(h) if h == expected => Ok(()),
            other => Err(Error::ConfigHashMismatch {
                artifact: path.to_path_buf(),
                expected: expected.to_string(),
                found: other.clone().unwrap_or_else(|| "<none>".into()),
            }),
        }
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let pos = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..pos], &bytes[pos + 1..]))
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamSet::new();
        p.insert("a.weight".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.125, 3.0, 4.0, -0.0]).unwrap());
        p.insert("a.bias".into(), Tensor::new(vec![2], vec![0.5, f32::MIN_POSITIVE as f64]).unwrap());
        Checkpoint::new("motion", p).with_hash("abc").with_meta("stage", 2)
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.manifest_entries().len(), 2);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Corrupt { reason, .. } if reason.contains("truncated blob")));
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn shape_count_mismatch_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("\"count\": 6", "\"count\": 5");
        // Same length edit keeps the manifest length line valid.
        let err = Checkpoint::from_bytes(text.as_bytes(), Path::new("mem"));
        assert!(err.is_err());
    }
}
