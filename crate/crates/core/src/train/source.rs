use std::collections::HashMap;

use crate::audio::{preprocess_file, AudioClip};
use crate::data::{ClipCache, Manifest};
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::resampler::PatientBag;

/// Random access to patient bags by id.
pub trait BagSource {
    /// `(patient_id, dataset_tag)` for every patient, in a fixed order.
    fn patients(&self) -> Vec<(String, String)>;

    fn bag(&self, patient_id: &str) -> Result<PatientBag>;
}

/// Bags built from a manifest, preprocessing each WAV at `max_seconds` on
/// every request unless a clip cache is attached.
#[derive(Clone, Debug)]
pub struct ManifestSource {
    pub manifest: Manifest,
    pub max_seconds: f64,
    pub cache: Option<ClipCache>,
    /// Skip audio decoding; clips carry only site and patient id.
    pub metadata_only: bool,
}

impl ManifestSource {
    pub fn new(manifest: Manifest, max_seconds: f64) -> Self {
        Self {
            manifest,
            max_seconds,
            cache: None,
            metadata_only: false,
        }
    }

    /// Metadata-only for externally embedded clips.
    pub fn for_encoder(manifest: Manifest, max_seconds: f64, kind: EncoderKind) -> Self {
        Self {
            metadata_only: kind == EncoderKind::External,
            ..Self::new(manifest, max_seconds)
        }
    }
}

impl BagSource for ManifestSource {
    fn patients(&self) -> Vec<(String, String)> {
        self.manifest
            .entries
            .iter()
            .map(|e| (e.patient_id.clone(), e.dataset.clone()))
            .collect()
    }

    fn bag(&self, patient_id: &str) -> Result<PatientBag> {
        let entry = self
            .manifest
            .get(patient_id)
            .ok_or_else(|| Error::MissingId(patient_id.to_string()))?;
        if let Some(cache) = &self.cache {
            return cache.bag(&self.manifest, entry, self.max_seconds);
        }
        let clips = entry
            .clips
            .iter()
            .map(|c| {
                if self.metadata_only {
                    Ok(AudioClip {
                        waveform: Vec::new(),
                        valid_len: 0,
                        site: c.site.clone(),
                        patient_id: entry.patient_id.clone(),
                    })
                } else {
                    preprocess_file(self.manifest.resolve(&c.path), self.max_seconds, &c.site, &entry.patient_id)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        PatientBag::new(entry.patient_id.clone(), clips, entry.qa_pairs()?, entry.dataset.clone())
    }
}

/// Preloaded bags, mostly for tests.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    order: Vec<(String, String)>,
    bags: HashMap<String, PatientBag>,
}

impl MemorySource {
    pub fn new(bags: Vec<PatientBag>) -> Self {
        let order = bags
            .iter()
            .map(|b| (b.patient_id.clone(), b.dataset_tag.clone()))
            .collect();
        let bags = bags.into_iter().map(|b| (b.patient_id.clone(), b)).collect();
        Self { order, bags }
    }
}

impl BagSource for MemorySource {
    fn patients(&self) -> Vec<(String, String)> {
        self.order.clone()
    }

    fn bag(&self, patient_id: &str) -> Result<PatientBag> {
        self.bags
            .get(patient_id)
            .cloned()
            .ok_or_else(|| Error::MissingId(patient_id.to_string()))
    }
}
