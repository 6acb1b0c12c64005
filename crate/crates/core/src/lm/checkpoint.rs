//! Checkpoint container.
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `AQCKPT01` |
//! | 8     | header length `H` (`u64` LE) |
//! | H     | UTF-8 JSON [`CheckpointHeader`] |
//! | 8·n   | parameter values, `f64` LE, in header order |
//! | 32    | SHA-256 of every preceding byte |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::TextVocab;
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"AQCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMeta {
    pub name: String,
    pub learning_rate: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub vocab: Option<TextVocab>,
    pub groups: Vec<GroupMeta>,
    pub params: Vec<ParamMeta>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes a checkpoint and returns its hex SHA-256.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: serde_json::Value,
    vocab: Option<&TextVocab>,
    store: &ParamStore,
    extra: serde_json::Value,
) -> Result<String> {
    let path = path.as_ref();
    let mut offset = 0;
    let params = store
        .params()
        .iter()
        .map(|p| {
            let meta = ParamMeta {
                name: p.name.clone(),
                group: store.groups()[p.group.0].name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            meta
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config,
        vocab: vocab.cloned(),
        groups: store
            .groups()
            .iter()
            .map(|g| GroupMeta {
                name: g.name.clone(),
                learning_rate: g.learning_rate,
                frozen: g.frozen,
            })
            .collect(),
        params,
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 8 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in store.params() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(digest))
}

/// Reads and verifies a checkpoint, rebuilding the parameter store with its groups.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamStore)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::HashMismatch {
            expected: hex::encode(stored),
            found: hex::encode(digest),
        });
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let data = &body[16 + hlen..];
    let mut store = ParamStore::new();
    for g in &header.groups {
        store.group(&g.name, g.learning_rate, g.frozen);
    }
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let raw = data
            .get(p.offset * 8..(p.offset + n) * 8)
            .ok_or_else(|| bad(&format!("data for {} out of range", p.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let g = store
            .find_group(&p.group)
            .ok_or_else(|| bad(&format!("unknown group {}", p.group)))?;
        store.add(p.name.clone(), Tensor::new(p.shape.clone(), values)?, g);
    }
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let a = s.group("lm", 0.0, true);
        let b = s.group("adapter", 1.5e-5, false);
        s.add("lm.w", Tensor::randn(&[3, 4], 1.0, &mut rng), a);
        s.add("xattn.alpha", Tensor::zeros(&[1]), b);
        s.add("lm.b", Tensor::randn(&[4], 1.0, &mut rng), a);
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let s = store();
        let vocab = TextVocab::build(&["a a b b"], 2).unwrap();
        save_checkpoint(&p, serde_json::json!({"d": 4}), Some(&vocab), &s, serde_json::json!({"epoch": 2})).unwrap();
        let (h, back) = load_checkpoint(&p).unwrap();
        assert_eq!(h.vocab.unwrap(), vocab);
        assert_eq!(h.config["d"], 4);
        assert_eq!(back.len(), 3);
        for id in s.ids() {
            assert!(s.get(id).bit_eq(back.get(id)));
            assert_eq!(s.param(id).name, back.param(id).name);
            assert_eq!(s.group_of(id).name, back.group_of(id).name);
            assert_eq!(s.group_of(id).frozen, back.group_of(id).frozen);
        }
    }

    #[test]
    fn any_flipped_byte_fails_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, serde_json::Value::Null, None, &store(), serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn copy_values_by_name() {
        let src = store();
        let mut dst = store();
        for id in dst.ids().collect::<Vec<_>>() {
            dst.get_mut(id).scale_assign(0.0);
        }
        assert_eq!(dst.copy_values_from(&src, |n| n.starts_with("lm.")).unwrap(), 2);
        assert!(dst.get(dst.by_name("lm.w").unwrap()).bit_eq(src.get(src.by_name("lm.w").unwrap())));
    }
}
