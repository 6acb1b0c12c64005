//! File-backed store of precomputed clip embeddings.
//!
//! Each clip lives in its own file:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `AQEMBED1` |
//! | 8     | `N` rows (`u64` LE) |
//! | 8     | `d_embed` (`u64` LE) |
//! | 4·N·d | row-major `f32` LE |
//!
//! An `index.json` object maps clip ids to file paths (relative paths resolve
//! against the index's directory).

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

const MAGIC: &[u8; 8] = b"AQEMBED1";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, Default)]
pub struct EmbeddingStore {
    root: PathBuf,
    index: BTreeMap<String, PathBuf>,
}

impl EmbeddingStore {
    /// Opens `dir/index.json`. A missing index yields an empty store.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let idx = root.join(INDEX_FILE);
        let index = if idx.exists() {
            let text = std::fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?;
            serde_json::from_str(&text)?
        } else {
            BTreeMap::new()
        };
        Ok(Self { root, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, clip_id: &str) -> bool {
        self.index.contains_key(clip_id)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reads the `[N, d_embed]` matrix stored for `clip_id`.
    pub fn load(&self, clip_id: &str, d_embed: usize) -> Result<Tensor> {
        let rel = self
            .index
            .get(clip_id)
            .ok_or_else(|| Error::MissingId(clip_id.to_string()))?;
        let path = self.resolve(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |why: &str| Error::EmbeddingStore(format!("{}: {why}", path.display()));
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if d != d_embed {
            return Err(Error::Config(format!(
                "embedding width {d} for {clip_id} does not match d_embed {d_embed}"
            )));
        }
        let body = &bytes[24..];
        if body.len() != n * d * 4 {
            return Err(bad("payload size disagrees with header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Tensor::new(vec![n, d], data)
    }

    /// Writes a matrix under `dir/<file_name>` and records it in the index.
    pub fn insert(&mut self, clip_id: &str, file_name: &str, matrix: &Tensor) -> Result<()> {
        let path = self.root.join(file_name);
        write_embedding_file(&path, matrix)?;
        self.index.insert(clip_id.to_string(), PathBuf::from(file_name));
        let idx = self.root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&self.index)?;
        std::fs::write(&idx, text).map_err(|e| Error::io(&idx, e))
    }
}

pub fn write_embedding_file(path: &Path, matrix: &Tensor) -> Result<()> {
    if matrix.shape().len() != 2 {
        return Err(Error::shape("write_embedding_file", "matrix must be 2-D"));
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&(matrix.rows() as u64).to_le_bytes())?;
    put(&(matrix.cols() as u64).to_le_bytes())?;
    for &v in matrix.data() {
        put(&(v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
