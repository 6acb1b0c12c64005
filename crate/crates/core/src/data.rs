//! Manifest schema and clip caching.
//!
//! A manifest is JSONL, one patient per line:
//!
//! ```json
//! {"patient_id": "synth-0001", "dataset": "synth",
//!  "clips": [{"path": "wav/synth-0001_0.wav", "site": "AV"}],
//!  "qa": [{"question": "is a murmur present?", "answer": "no", "kind": "binary"}]}
//! ```
//!
//! Relative clip paths resolve against `$AUSCULTQA_DATA_ROOT` when set, else
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{preprocess_file, AudioClip};
use crate::error::{Error, Result};
use crate::resampler::{PatientBag, QaKind, QaPair};

pub const DATA_ROOT_ENV: &str = "AUSCULTQA_DATA_ROOT";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub path: String,
    pub site: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaEntry {
    pub question: String,
    pub answer: String,
    pub kind: QaKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub dataset: String,
    pub clips: Vec<ClipEntry>,
    pub qa: Vec<QaEntry>,
}

impl ManifestEntry {
    pub fn qa_pairs(&self) -> Result<Vec<QaPair>> {
        self.qa
            .iter()
            .map(|q| QaPair::new(q.question.clone(), q.answer.clone(), q.kind))
            .collect()
    }

    pub fn sites(&self) -> Vec<&str> {
        self.clips.iter().map(|c| c.site.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a manifest file, or `dir/manifest.jsonl` when given a directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if e.clips.is_empty() {
                return Err(Error::Data(format!("patient {} has no clips", e.patient_id)));
            }
            e.qa_pairs()?;
            entries.push(e);
        }
        let root = match std::env::var_os(DATA_ROOT_ENV) {
            Some(r) if !r.is_empty() => PathBuf::from(r),
            _ => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_manifest(path, &self.entries)
    }

    pub fn resolve(&self, clip_path: &str) -> PathBuf {
        let p = Path::new(clip_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn get(&self, patient_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.patient_id == patient_id)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Preprocessed clips on disk, one file per (patient, clip index, max_seconds).
#[derive(Clone, Debug)]
pub struct ClipCache {
    pub dir: PathBuf,
}

impl ClipCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn clip_path(&self, patient_id: &str, index: usize, max_seconds: f64) -> PathBuf {
        self.dir.join(format!("{patient_id}_{index}_{max_seconds}s.aqclip"))
    }

    /// Returns the cached clip, preprocessing the source WAV on a miss.
    pub fn get(&self, manifest: &Manifest, entry: &ManifestEntry, index: usize, max_seconds: f64) -> Result<AudioClip> {
        let cached = self.clip_path(&entry.patient_id, index, max_seconds);
        if cached.exists() {
            return AudioClip::read(&cached);
        }
        let clip = entry
            .clips
            .get(index)
            .ok_or_else(|| Error::Data(format!("patient {} has no clip {index}", entry.patient_id)))?;
        let c = preprocess_file(manifest.resolve(&clip.path), max_seconds, &clip.site, &entry.patient_id)?;
        c.write(&cached)?;
        Ok(c)
    }

    pub fn bag(&self, manifest: &Manifest, entry: &ManifestEntry, max_seconds: f64) -> Result<PatientBag> {
        let clips = (0..entry.clips.len())
            .map(|i| self.get(manifest, entry, i, max_seconds))
            .collect::<Result<Vec<_>>>()?;
        PatientBag::new(entry.patient_id.clone(), clips, entry.qa_pairs()?, entry.dataset.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav_pcm16;

    #[test]
    fn manifest_roundtrip_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("wav")).unwrap();
        let x: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        write_wav_pcm16(dir.path().join("wav/a.wav"), &x, 8000).unwrap();
        let entries = vec![ManifestEntry {
            patient_id: "p1".into(),
            dataset: "d".into(),
            clips: vec![ClipEntry {
                path: "wav/a.wav".into(),
                site: "AV".into(),
            }],
            qa: vec![QaEntry {
                question: "is a murmur present?".into(),
                answer: "No".into(),
                kind: QaKind::Binary,
            }],
        }];
        let mp = dir.path().join(MANIFEST_FILE);
        write_manifest(&mp, &entries).unwrap();
        let m = Manifest::load(dir.path()).unwrap();
        assert_eq!(m.entries, entries);
        let cache = ClipCache::new(dir.path().join("cache")).unwrap();
        let bag = cache.bag(&m, &m.entries[0], 30.0).unwrap();
        assert_eq!(bag.qa_pairs[0].answer, "no");
        assert_eq!(bag.clips[0].valid_len, 16_000);
        assert!(cache.clip_path("p1", 0, 30.0).exists());
        let again = cache.bag(&m, &m.entries[0], 30.0).unwrap();
        assert_eq!(again, bag);
    }

    #[test]
    fn bad_lines_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.jsonl");
        std::fs::write(&mp, "{\"patient_id\": 3}\n").unwrap();
        assert!(Manifest::load(&mp).unwrap_err().is_data_error());
    }
}
