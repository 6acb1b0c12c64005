//! Synthetic auscultation corpora with planted events and derived QA.
//!
//! Every clip is pink-ish background noise. Abnormal patients get one event in
//! one clip: a murmur (band-limited noise burst whose sub-band of 150–400 Hz
//! depends on the recording site) or, when enabled, a crackle train. Onsets
//! are uniform over the clip; events running past the end are cut off.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::write_wav_pcm16;
use crate::data::{write_manifest, ClipEntry, ManifestEntry, QaEntry, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::resampler::{QaKind, QaPair};

pub const TRUTH_FILE: &str = "truth.jsonl";
pub const MURMUR_QUESTION: &str = "is a murmur present?";
pub const SITE_QUESTION: &str = "which site shows the abnormality?";
pub const CRACKLE_QUESTION: &str = "are crackles present?";
const BACKGROUND_RMS: f64 = 0.05;
const FADE_SECONDS: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub sites: Vec<String>,
    /// Inclusive range of clips per patient.
    pub clips_per_patient: (usize, usize),
    pub clip_seconds: (f64, f64),
    pub sample_rate: u32,
    pub snr_db: f64,
    pub event_seconds: (f64, f64),
    pub murmur_band: (f64, f64),
    /// Fraction of patients carrying an event.
    pub abnormal_fraction: f64,
    /// Alternate abnormal patients between murmurs and crackles.
    pub crackles: bool,
    pub dataset: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_patients: 200,
            sites: ["AV", "PV", "TV", "MV"].map(String::from).to_vec(),
            clips_per_patient: (3, 5),
            clip_seconds: (30.0, 30.0),
            sample_rate: 4000,
            snr_db: 10.0,
            event_seconds: (4.0, 6.0),
            murmur_band: (150.0, 400.0),
            abnormal_fraction: 0.5,
            crackles: false,
            dataset: "synth".into(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.sites.is_empty() {
            return bad("no sites");
        }
        if self.clips_per_patient.0 == 0 || self.clips_per_patient.0 > self.clips_per_patient.1 {
            return bad("clips_per_patient must be a non-empty range starting at >= 1");
        }
        if !(self.clip_seconds.0 > 0.0 && self.clip_seconds.0 <= self.clip_seconds.1) {
            return bad("clip_seconds must be a positive range");
        }
        if !(self.event_seconds.0 > 0.0 && self.event_seconds.0 <= self.event_seconds.1) {
            return bad("event_seconds must be a positive range");
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if !(0.0 <= self.murmur_band.0 && self.murmur_band.0 < self.murmur_band.1 && self.murmur_band.1 < nyquist) {
            return bad("murmur band must lie below Nyquist");
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return bad("abnormal_fraction must be in [0, 1]");
        }
        Ok(())
    }

    /// Sub-band of the murmur band assigned to site `k`.
    pub fn site_band(&self, k: usize) -> (f64, f64) {
        let w = (self.murmur_band.1 - self.murmur_band.0) / self.sites.len() as f64;
        let lo = self.murmur_band.0 + w * k as f64;
        (lo, lo + w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Murmur,
    Crackle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEvent {
    pub clip: usize,
    pub site: String,
    pub kind: EventKind,
    pub onset_s: f64,
    /// Planned length; the audible part ends at the clip boundary.
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub dataset: String,
    pub sites: Vec<String>,
    pub clip_seconds: Vec<f64>,
    pub events: Vec<ClipEvent>,
}

impl PatientTruth {
    /// `healthy`, `murmur` or `crackle`, from the planted events.
    pub fn condition(&self) -> &'static str {
        match self.events.first().map(|e| e.kind) {
            None => "healthy",
            Some(EventKind::Murmur) => "murmur",
            Some(EventKind::Crackle) => "crackle",
        }
    }
}

pub fn site_name(label: &str) -> String {
    match label.to_ascii_uppercase().as_str() {
        "AV" => "aortic".into(),
        "PV" => "pulmonic".into(),
        "TV" => "tricuspid".into(),
        "MV" => "mitral".into(),
        _ => label.to_lowercase(),
    }
}

/// Murmur and site questions, plus a crackle question when crackles are enabled.
pub fn derive_qa(truth: &PatientTruth, with_crackles: bool) -> Vec<QaPair> {
    let yn = |b: bool| if b { "yes" } else { "no" };
    let has = |k: EventKind| truth.events.iter().any(|e| e.kind == k);
    let site = truth.events.first().map_or_else(|| "none".to_string(), |e| site_name(&e.site));
    let mut qa = vec![
        QaPair::new(MURMUR_QUESTION, yn(has(EventKind::Murmur)), QaKind::Binary),
        QaPair::new(SITE_QUESTION, site, QaKind::Open),
    ];
    if with_crackles {
        qa.push(QaPair::new(CRACKLE_QUESTION, yn(has(EventKind::Crackle)), QaKind::Binary));
    }
    qa.into_iter().map(|q| q.expect("templates are valid")).collect()
}

/// Pink-ish noise (three-pole approximation) scaled to `rms`.
pub fn pink_noise<R: Rng + ?Sized>(n: usize, rms: f64, rng: &mut R) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut x: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    scale_to_rms(&mut x, rms);
    x
}

fn scale_to_rms(x: &mut [f64], rms: f64) {
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if cur > 0.0 {
        for v in x.iter_mut() {
            *v *= rms / cur;
        }
    }
}

/// White noise with every FFT bin outside `[lo, hi]` Hz removed.
pub fn band_noise<R: Rng + ?Sized>(n: usize, rate: f64, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        if f < lo || f > hi {
            *b = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Decaying 2 ms clicks at irregular 40–120 ms intervals.
fn crackle_train<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let mut x = vec![0.0; n];
    let mut t = 0usize;
    while t < n {
        let len = (0.002 * rate).ceil() as usize + 1;
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for k in 0..len.min(n - t) {
            let tt = k as f64 / rate;
            x[t + k] += sign * (2.0 * PI * 900.0 * tt).sin() * (-tt / 0.0007).exp();
        }
        t += (rng.random_range(0.04..0.12) * rate) as usize;
    }
    x
}

/// Adds `event` at `start`, scaled so its RMS sits `snr_db` above `bg_rms`,
/// with short raised-cosine fades.
fn mix_event(clip: &mut [f64], start: usize, mut event: Vec<f64>, bg_rms: f64, snr_db: f64, rate: f64) {
    let end = (start + event.len()).min(clip.len());
    event.truncate(end - start);
    if event.is_empty() {
        return;
    }
    scale_to_rms(&mut event, bg_rms * 10f64.powf(snr_db / 20.0));
    let fade = ((FADE_SECONDS * rate) as usize).min(event.len() / 2);
    let n = event.len();
    for k in 0..fade {
        let g = 0.5 - 0.5 * (PI * k as f64 / fade as f64).cos();
        event[k] *= g;
        event[n - 1 - k] *= g;
    }
    for (c, e) in clip[start..end].iter_mut().zip(&event) {
        *c += e;
    }
}

/// Patient `i` is abnormal iff the golden-ratio sequence falls below the
/// fraction, which keeps every prefix of the corpus close to balanced.
fn is_abnormal(i: usize, fraction: f64) -> bool {
    const PHI_INV: f64 = 0.618_033_988_749_894_9;
    ((i as f64 + 0.5) * PHI_INV).fract() < fraction
}

/// One patient's clips (at `spec.sample_rate`) and its truth record.
pub fn synth_patient(spec: &SynthSpec, index: usize) -> (Vec<Vec<f64>>, PatientTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let rate = f64::from(spec.sample_rate);
    let n_clips = rng.random_range(spec.clips_per_patient.0..=spec.clips_per_patient.1);
    let mut order: Vec<usize> = (0..spec.sites.len()).collect();
    order.shuffle(&mut rng);
    let site_idx: Vec<usize> = (0..n_clips).map(|k| order[k % order.len()]).collect();
    let secs: Vec<f64> = (0..n_clips)
        .map(|_| {
            if spec.clip_seconds.0 == spec.clip_seconds.1 {
                spec.clip_seconds.0
            } else {
                rng.random_range(spec.clip_seconds.0..spec.clip_seconds.1)
            }
        })
        .collect();
    let mut clips: Vec<Vec<f64>> = secs
        .iter()
        .map(|s| pink_noise((s * rate).round() as usize, BACKGROUND_RMS, &mut rng))
        .collect();

    let mut events = Vec::new();
    if is_abnormal(index, spec.abnormal_fraction) {
        let kind = if spec.crackles && (index / 2) % 2 == 1 {
            EventKind::Crackle
        } else {
            EventKind::Murmur
        };
        let c = rng.random_range(0..n_clips);
        let onset = rng.random_range(0.0..secs[c]);
        let dur = rng.random_range(spec.event_seconds.0..=spec.event_seconds.1);
        let start = (onset * rate) as usize;
        let len = (dur * rate).round() as usize;
        let ev = match kind {
            EventKind::Murmur => {
                let (lo, hi) = spec.site_band(site_idx[c]);
                band_noise(len, rate, lo, hi, &mut rng)
            }
            EventKind::Crackle => crackle_train(len, rate, &mut rng),
        };
        mix_event(&mut clips[c], start, ev, BACKGROUND_RMS, spec.snr_db, rate);
        events.push(ClipEvent {
            clip: c,
            site: spec.sites[site_idx[c]].clone(),
            kind,
            onset_s: onset,
            duration_s: dur,
        });
    }
    let truth = PatientTruth {
        patient_id: format!("{}-{index:04}", spec.dataset),
        dataset: spec.dataset.clone(),
        sites: site_idx.iter().map(|&k| spec.sites[k].clone()).collect(),
        clip_seconds: secs,
        events,
    };
    (clips, truth)
}

/// Writes `wav/*.wav`, `manifest.jsonl` and `truth.jsonl` under `out`.
pub fn generate(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<Vec<PatientTruth>> {
    spec.validate()?;
    let out = out.as_ref();
    let wav_dir = out.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut entries = Vec::with_capacity(spec.n_patients);
    let mut truths = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let (clips, truth) = synth_patient(spec, i);
        let mut clip_entries = Vec::with_capacity(clips.len());
        for (k, (x, site)) in clips.iter().zip(&truth.sites).enumerate() {
            let rel = format!("wav/{}_{k}.wav", truth.patient_id);
            write_wav_pcm16(out.join(&rel), x, spec.sample_rate)?;
            clip_entries.push(ClipEntry {
                path: rel,
                site: site.clone(),
            });
        }
        entries.push(ManifestEntry {
            patient_id: truth.patient_id.clone(),
            dataset: spec.dataset.clone(),
            clips: clip_entries,
            qa: derive_qa(&truth, spec.crackles)
                .into_iter()
                .map(|q| QaEntry {
                    question: q.question,
                    answer: q.answer,
                    kind: q.kind,
                })
                .collect(),
        });
        truths.push(truth);
    }
    write_manifest(out.join(MANIFEST_FILE), &entries)?;
    let mut s = String::new();
    for t in &truths {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    let tp = out.join(TRUTH_FILE);
    std::fs::write(&tp, s).map_err(|e| Error::io(&tp, e))?;
    Ok(truths)
}
