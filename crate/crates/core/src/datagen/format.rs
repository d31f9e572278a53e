//! Binary dataset files.
//!
//! ```text
//! magic    8 bytes  "FDCLIPS\0"
//! version  u32      1
//! count    u64
//! frames   u32
//! dim      u32
//! prov     u8       0 ground truth, 1 teacher generated
//! group    u8
//! style    u32      u32::MAX for pooled sets
//! clips    count·frames·dim f32, clip-major then frame-major
//! conds    count u32, u32::MAX for the null token
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{ClipDataset, Provenance, StyleGroup};
use crate::clip::Clip;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nets::Condition;

const MAGIC: &[u8; 8] = b"FDCLIPS\0";
const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8 + 4 + 4 + 1 + 1 + 4;

pub fn encode(ds: &ClipDataset) -> Vec<u8> {
    let (frames, dim) = ds
        .clips
        .first()
        .map(|c| (c.frames(), c.dim()))
        .unwrap_or((0, 0));
    let mut out = Vec::with_capacity(HEADER + ds.len() * (frames * dim + 1) * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.push(ds.provenance.code());
    out.push(ds.group.code());
    out.extend_from_slice(&ds.style_id.map_or(u32::MAX, |s| s as u32).to_le_bytes());
    for c in &ds.clips {
        for &v in c.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for c in &ds.conditions {
        out.extend_from_slice(&c.to_raw().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ClipDataset> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header = (|| Some((r.u64()?, r.u32()?, r.u32()?, r.u8()?, r.u8()?, r.u32()?)))();
    let (count, frames, dim, prov, group, style) = header.ok_or_else(|| corrupt("truncated header"))?;
    let provenance = Provenance::from_code(prov).ok_or_else(|| corrupt("unknown provenance"))?;
    let group = StyleGroup::from_code(group).ok_or_else(|| corrupt("unknown style group"))?;
    let (count, frames, dim) = (count as usize, frames as usize, dim as usize);
    let per_clip = frames * dim;
    if count > 0 && per_clip == 0 {
        return Err(corrupt("zero-sized clips"));
    }
    let expected = count
        .checked_mul(per_clip + 1)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| corrupt("size overflow"))?;
    if bytes.len() != expected {
        return Err(corrupt(&format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut clips = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = r.take(per_clip * 4).expect("length checked");
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        clips.push(Clip::new(frames, dim, data).map_err(|e| corrupt(&e.to_string()))?);
    }
    let conditions = (0..count)
        .map(|_| Condition::from_raw(r.u32().expect("length checked")))
        .collect();
    let style_id = (style != u32::MAX).then_some(style as usize);
    ClipDataset::new(clips, conditions, provenance, group, style_id)
}

pub fn dataset_save(ds: &ClipDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ds))
}

pub fn dataset_load(path: &Path) -> Result<ClipDataset> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_ground_truth, StyleSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let s = StyleSpec::mixture(2, "r", StyleGroup::RealisticAnalog, [0.9, 1.1], -0.2, 0.7);
        let mut ds = sample_ground_truth(&s, 5, 8, 2, 8, 3).unwrap();
        ds.conditions[1] = Condition::Null;
        let bytes = encode(&ds);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
