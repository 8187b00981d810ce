//! Checkpoint file format.
//!
//! ```text
//! "CXLM" | version: u8 | header_len: u64 LE | header JSON | f32 LE blobs
//! ```
//!
//! The header carries the architecture descriptor and, per tensor, its
//! dtype, shape, byte offset into the blob region and byte length. The whole
//! header is validated against the descriptor before any tensor is decoded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierArch, ClassifierParams};
use crate::error::{Error, Result};
use crate::lm::{LmArch, LmParams};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"CXLM";
pub const VERSION: u8 = 1;
const PREFIX: usize = 4 + 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchDescriptor {
    Lm(LmArch),
    Classifier(ClassifierArch),
}

impl ArchDescriptor {
    fn expected_shapes(&self) -> std::collections::BTreeMap<String, Vec<usize>> {
        match self {
            ArchDescriptor::Lm(a) => a.expected_shapes(),
            ArchDescriptor::Classifier(a) => a.expected_shapes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchDescriptor,
    tensors: Vec<TensorEntry>,
}

pub fn encode(arch: &ArchDescriptor, tensors: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors.iter() {
        let nbytes = (t.len() * 4) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = serde_json::to_vec(&Header {
        arch: *arch,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ArchDescriptor, ParamSet<f32>)> {
    if bytes.len() < PREFIX {
        return Err(Error::Truncated {
            needed: PREFIX,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let blob_start = PREFIX
        .checked_add(header_len)
        .ok_or_else(|| Error::Header("header length overflows".into()))?;
    if bytes.len() < blob_start {
        return Err(Error::Truncated {
            needed: blob_start,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX..blob_start])
        .map_err(|e| Error::Header(e.to_string()))?;

    let expected = header.arch.expected_shapes();
    if header.tensors.len() != expected.len() {
        return Err(Error::Header(format!(
            "architecture expects {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let mut cursor = 0u64;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Header(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let want = expected.get(&e.name).ok_or_else(|| {
            Error::Header(format!("unexpected tensor `{}` for this architecture", e.name))
        })?;
        if &e.shape != want {
            return Err(Error::ShapeMismatch {
                name: e.name.clone(),
                expected: want.clone(),
                found: e.shape.clone(),
            });
        }
        let elems: u64 = e.shape.iter().map(|&d| d as u64).product();
        if e.nbytes != elems * 4 {
            return Err(Error::Header(format!(
                "`{}` declares {} bytes for {} f32 elements",
                e.name, e.nbytes, elems
            )));
        }
        if e.offset != cursor {
            return Err(Error::Header(format!(
                "`{}` at offset {} but previous tensor ends at {}",
                e.name, e.offset, cursor
            )));
        }
        cursor += e.nbytes;
    }
    let needed = blob_start + cursor as usize;
    if bytes.len() != needed {
        if bytes.len() < needed {
            return Err(Error::Truncated {
                needed,
                found: bytes.len(),
            });
        }
        return Err(Error::Header(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - needed
        )));
    }

    let mut tensors = ParamSet::new();
    for e in header.tensors {
        let start = blob_start + e.offset as usize;
        let data = bytes[start..start + e.nbytes as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name, Tensor::from_vec(&e.shape, data)?);
    }
    Ok((header.arch, tensors))
}

pub fn save(path: &Path, arch: &ArchDescriptor, tensors: &ParamSet<f32>) -> Result<()> {
    let bytes = encode(arch, tensors)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ArchDescriptor, ParamSet<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_lm(path: &Path, p: &LmParams<f32>) -> Result<()> {
    save(path, &ArchDescriptor::Lm(p.arch), &p.tensors)
}

pub fn load_lm(path: &Path) -> Result<LmParams<f32>> {
    match load(path)? {
        (ArchDescriptor::Lm(arch), t) => LmParams::from_parts(arch, t),
        _ => Err(Error::Header(format!("{} is not a language-model checkpoint", path.display()))),
    }
}

pub fn save_classifier(path: &Path, p: &ClassifierParams<f32>) -> Result<()> {
    save(path, &ArchDescriptor::Classifier(p.arch), &p.tensors)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierParams<f32>> {
    match load(path)? {
        (ArchDescriptor::Classifier(arch), t) => ClassifierParams::from_parts(arch, t),
        _ => Err(Error::Header(format!("{} is not a classifier checkpoint", path.display()))),
    }
}

/// Hex sha256 of the little-endian tensor contents, in name order.
pub fn hash_params(tensors: &ParamSet<f32>) -> String {
    hex::encode(Sha256::digest(tensors.content_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierKind;
    use crate::rng::seeded;

    fn lm() -> LmParams<f32> {
        LmParams::init_with(LmArch::new(7, 1, 8, 2, 6), 0.3, true, &mut seeded(9)).unwrap()
    }

    fn bytes() -> Vec<u8> {
        let p = lm();
        encode(&ArchDescriptor::Lm(p.arch), &p.tensors).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = lm();
        let (arch, t) = decode(&bytes()).unwrap();
        assert_eq!(arch, ArchDescriptor::Lm(p.arch));
        assert_eq!(t, p.tensors);
    }

    #[test]
    fn classifier_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/c.ckpt");
        let c: ClassifierParams<f32> = ClassifierParams::init_with(
            ClassifierArch::new(ClassifierKind::Small, 9, 3),
            0.1,
            true,
            &mut seeded(1),
        )
        .unwrap();
        save_classifier(&path, &c).unwrap();
        assert_eq!(load_classifier(&path).unwrap(), c);
        assert!(load_lm(&path).is_err());
    }

    #[test]
    fn corrupted_magic() {
        let mut b = bytes();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::BadMagic(_))));
    }

    #[test]
    fn wrong_version() {
        let mut b = bytes();
        b[4] = 7;
        assert!(matches!(decode(&b), Err(Error::UnsupportedVersion(7))));
    }

    #[test]
    fn truncated_blob() {
        let b = bytes();
        assert!(matches!(decode(&b[..b.len() - 3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn wrong_declared_byte_length_rejected() {
        let b = bytes();
        let hlen = u64::from_le_bytes(b[5..13].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&b[13..13 + hlen]).unwrap();
        // head.b has 7 elements → 28 bytes
        let bad = header.replacen("\"nbytes\":28", "\"nbytes\":32", 1);
        assert_ne!(bad, header);
        let mut nb = Vec::new();
        nb.extend_from_slice(&b[..5]);
        nb.extend_from_slice(&(bad.len() as u64).to_le_bytes());
        nb.extend_from_slice(bad.as_bytes());
        nb.extend_from_slice(&b[13 + hlen..]);
        assert!(matches!(decode(&nb), Err(Error::Header(_))));
    }

    #[test]
    fn shape_inconsistent_with_arch_rejected() {
        let p = lm();
        let mut t = p.tensors.clone();
        t.insert("head.b", Tensor::zeros(&[8]));
        let b = encode(&ArchDescriptor::Lm(p.arch), &t).unwrap();
        assert!(matches!(decode(&b), Err(Error::ShapeMismatch { .. })));
    }
}
