//! Sample records, image records, their line-delimited JSON storage, and the
//! heuristic filter that runs before relevance scoring.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped on load so that log ratios stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionClass {
    Conversation,
    DetailedDescription,
    ComplexReasoning,
}

impl InstructionClass {
    pub const ALL: [InstructionClass; 3] = [
        InstructionClass::Conversation,
        InstructionClass::DetailedDescription,
        InstructionClass::ComplexReasoning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstructionClass::Conversation => "conversation",
            InstructionClass::DetailedDescription => "detailed_description",
            InstructionClass::ComplexReasoning => "complex_reasoning",
        }
    }
}

impl fmt::Display for InstructionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InstructionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InstructionClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown instruction class {s:?}")))
    }
}

/// An image as the pipeline sees it: an id and, in toy mode, a feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl ImageRef {
    pub fn new(image_id: impl Into<String>, features: Vec<f64>) -> Self {
        ImageRef {
            image_id: image_id.into(),
            features: Some(features),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::InvalidImage {
                image_id: String::new(),
                reason: "empty image_id".into(),
            });
        }
        if let Some(f) = &self.features {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidImage {
                    image_id: self.image_id.clone(),
                    reason: "non-finite feature".into(),
                });
            }
        }
        Ok(())
    }
}

/// One question-answer pair tied to an image, with per-answer-token
/// probabilities under the image-conditioned and image-withheld passes.
///
/// Field order here is the on-disk field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlitSample {
    pub sample_id: String,
    pub image_id: String,
    pub instruction_class: InstructionClass,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub p_visual: Vec<f64>,
    pub p_direct: Vec<f64>,
}

impl VlitSample {
    pub fn answer_len(&self) -> usize {
        self.answer.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidSample {
            sample_id: self.sample_id.clone(),
            reason,
        };
        if self.sample_id.is_empty() {
            return Err(bad("empty sample_id".into()));
        }
        if self.image_id.is_empty() {
            return Err(bad("empty image_id".into()));
        }
        let n = self.answer.len();
        if n == 0 {
            return Err(bad("empty answer".into()));
        }
        if self.p_visual.len() != n || self.p_direct.len() != n {
            return Err(bad(format!(
                "probability lengths (p_visual {}, p_direct {}) do not match answer length {n}",
                self.p_visual.len(),
                self.p_direct.len()
            )));
        }
        for (name, probs) in [("p_visual", &self.p_visual), ("p_direct", &self.p_direct)] {
            if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0 && **p <= 1.0)) {
                return Err(bad(format!("{name} entry {p} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Clamp tiny (or zero) probabilities up to [`PROB_FLOOR`].
    /// Negative and non-finite values are left for `validate` to reject.
    pub fn clamp_probabilities(&mut self) {
        for p in self.p_visual.iter_mut().chain(self.p_direct.iter_mut()) {
            if p.is_finite() && *p >= 0.0 && *p < PROB_FLOOR {
                *p = PROB_FLOOR;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupKey {
    /// Exact equality of (image_id, question, answer).
    ExactQaPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_answer_tokens: usize,
    pub max_answer_tokens: usize,
    pub dedup_on: DedupKey,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_answer_tokens: 3,
            max_answer_tokens: 256,
            dedup_on: DedupKey::ExactQaPair,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_answer_tokens < 1 || self.min_answer_tokens > self.max_answer_tokens {
            return Err(Error::Config(format!(
                "filter bounds must satisfy 1 <= min ({}) <= max ({})",
                self.min_answer_tokens, self.max_answer_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Duplicate,
    TooShort,
    TooLong,
    Invalid,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Duplicate => "duplicate",
            DropReason::TooShort => "too_short",
            DropReason::TooLong => "too_long",
            DropReason::Invalid => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSample {
    pub sample_id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<VlitSample>,
    pub dropped: Vec<DroppedSample>,
}

/// Drop answers outside the length bounds, then exact duplicates of
/// (image_id, question, answer), keeping the first occurrence.
pub fn filter_samples(samples: &[VlitSample], cfg: &FilterConfig) -> FilterOutcome {
    let mut seen: HashSet<(&str, &[String], &[String])> = HashSet::new();
    let mut out = FilterOutcome::default();
    for s in samples {
        let n = s.answer_len();
        let reason = if n < cfg.min_answer_tokens {
            Some(DropReason::TooShort)
        } else if n > cfg.max_answer_tokens {
            Some(DropReason::TooLong)
        } else {
            let key = match cfg.dedup_on {
                DedupKey::ExactQaPair => (s.image_id.as_str(), s.question.as_slice(), s.answer.as_slice()),
            };
            (!seen.insert(key)).then_some(DropReason::Duplicate)
        };
        match reason {
            Some(reason) => out.dropped.push(DroppedSample {
                sample_id: s.sample_id.clone(),
                reason,
            }),
            None => out.kept.push(s.clone()),
        }
    }
    out
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, record));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize to JSON");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load and validate a samples file, in file order.
pub fn load_samples(path: &Path) -> Result<Vec<VlitSample>> {
    let records: Vec<(usize, VlitSample)> = read_jsonl(path)?;
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (_, mut s) in records {
        s.clamp_probabilities();
        s.validate()?;
        if !ids.insert(s.sample_id.clone()) {
            return Err(Error::DuplicateSampleId(s.sample_id));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn save_samples(samples: &[VlitSample], path: &Path) -> Result<()> {
    write_jsonl(path, samples)
}

pub fn load_images(path: &Path) -> Result<Vec<ImageRef>> {
    let records: Vec<(usize, ImageRef)> = read_jsonl(path)?;
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (_, img) in records {
        img.validate()?;
        if !ids.insert(img.image_id.clone()) {
            return Err(Error::InvalidImage {
                image_id: img.image_id,
                reason: "duplicate image_id".into(),
            });
        }
        out.push(img);
    }
    Ok(out)
}

pub fn save_images(images: &[ImageRef], path: &Path) -> Result<()> {
    write_jsonl(path, images)
}

pub fn load_dropped(path: &Path) -> Result<Vec<DroppedSample>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, d)| d).collect())
}

pub fn save_dropped(dropped: &[DroppedSample], path: &Path) -> Result<()> {
    write_jsonl(path, dropped)
}
