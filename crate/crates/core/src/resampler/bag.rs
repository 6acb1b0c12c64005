use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaKind {
    Binary,
    Open,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub kind: QaKind,
}

impl QaPair {
    /// Binary answers are lower-cased and must read `yes` or `no`.
    pub fn new(question: impl Into<String>, answer: impl Into<String>, kind: QaKind) -> Result<Self> {
        let mut answer: String = answer.into();
        if kind == QaKind::Binary {
            answer = answer.trim().trim_end_matches('.').to_lowercase();
            if answer != "yes" && answer != "no" {
                return Err(Error::Data(format!("binary answer {answer:?} is not yes/no")));
            }
        }
        Ok(Self {
            question: question.into(),
            answer,
            kind,
        })
    }
}

/// All recordings and questions of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientBag {
    pub patient_id: String,
    pub clips: Vec<AudioClip>,
    pub qa_pairs: Vec<QaPair>,
    pub dataset_tag: String,
}

impl PatientBag {
    pub fn new(
        patient_id: impl Into<String>,
        clips: Vec<AudioClip>,
        qa_pairs: Vec<QaPair>,
        dataset_tag: impl Into<String>,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if clips.is_empty() {
            return Err(Error::Data(format!("patient {patient_id} has no clips")));
        }
        if let Some(c) = clips.iter().find(|c| c.patient_id != patient_id) {
            return Err(Error::Data(format!(
                "clip of patient {} placed in bag {patient_id}",
                c.patient_id
            )));
        }
        Ok(Self {
            patient_id,
            clips,
            qa_pairs,
            dataset_tag: dataset_tag.into(),
        })
    }

    pub fn sites(&self) -> Vec<&str> {
        self.clips.iter().map(|c| c.site.as_str()).collect()
    }
}

/// Flattened multi-instance matrix.
#[derive(Clone, Debug)]
pub struct BagMatrix {
    /// `[M·N_max, D]`; rows with a false mask are exactly zero.
    pub x: Var,
    pub mask: Vec<bool>,
    pub clip_offsets: Vec<usize>,
    pub n_max: usize,
}

impl BagMatrix {
    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Zero-pads each sequence to the longest one and stacks them in clip order.
pub fn assemble_bag(tape: &mut Tape, seqs: &[TokenSequence]) -> Result<BagMatrix> {
    let first = seqs.first().ok_or(Error::Empty("assemble_bag"))?;
    let d = tape.shape(first.tokens)[1];
    for s in seqs {
        let shape = tape.shape(s.tokens);
        if shape.len() != 2 || shape[1] != d || shape[0] != s.mask.len() {
            return Err(Error::shape(
                "assemble_bag",
                format!("sequence {shape:?} does not match width {d} / mask length {}", s.mask.len()),
            ));
        }
    }
    let n_max = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    let mut parts = Vec::with_capacity(seqs.len() * 2);
    let mut mask = Vec::with_capacity(seqs.len() * n_max);
    let mut clip_offsets = Vec::with_capacity(seqs.len());
    for s in seqs {
        clip_offsets.push(mask.len());
        if !s.is_empty() {
            parts.push(tape.row_mask(s.tokens, s.mask.clone())?);
        }
        let pad = n_max - s.len();
        if pad > 0 {
            parts.push(tape.constant(Tensor::zeros(&[pad, d])));
        }
        mask.extend_from_slice(&s.mask);
        mask.resize(mask.len() + pad, false);
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    Ok(BagMatrix {
        x,
        mask,
        clip_offsets,
        n_max,
    })
}
