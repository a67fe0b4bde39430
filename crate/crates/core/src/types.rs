//! Shared data model: question instances, scoring methods, score vectors,
//! elimination and prediction outcomes.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder written in place of an image segment whenever a prompt is
/// flattened to text (fixtures, previews, mock-backend keys).
pub const IMAGE_PLACEHOLDER: &str = "⟦IMAGE⟧";

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` is empty")]
    EmptyField { field: &'static str },
    #[error("expected at least 2 options, found {0}")]
    TooFewOptions(usize),
    #[error("duplicate option text {text:?} at positions {first} and {second}")]
    DuplicateOption {
        text: String,
        first: usize,
        second: usize,
    },
    #[error("gold index {index} out of range for {n} options")]
    GoldIndexOutOfRange { index: i64, n: usize },
    #[error("unknown {field} value {value:?}")]
    UnknownValue { field: &'static str, value: String },
    #[error("image {path} is not readable: {source}")]
    UnreadableImage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Opaque image handle forwarded to backends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(PathBuf),
    Inline {
        media_type: String,
        #[serde(with = "b64")]
        data_base64: Vec<u8>,
    },
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

impl ImageRef {
    pub fn path(p: impl Into<PathBuf>) -> Self {
        ImageRef::Path(p.into())
    }

    pub fn media_type(&self) -> String {
        match self {
            ImageRef::Inline { media_type, .. } => media_type.clone(),
            ImageRef::Path(p) => {
                let ext = p
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase());
                match ext.as_deref() {
                    Some("png") => "image/png",
                    Some("jpg") | Some("jpeg") => "image/jpeg",
                    Some("gif") => "image/gif",
                    Some("webp") => "image/webp",
                    Some("bmp") => "image/bmp",
                    _ => "application/octet-stream",
                }
                .to_string()
            }
        }
    }

    pub fn read_bytes(&self) -> std::io::Result<Vec<u8>> {
        match self {
            ImageRef::Path(p) => std::fs::read(p),
            ImageRef::Inline { data_base64, .. } => Ok(data_base64.clone()),
        }
    }

    pub fn to_base64(&self) -> std::io::Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.read_bytes()?))
    }

    /// Checks that the referenced bytes can be opened without reading them all.
    pub fn check_readable(&self) -> Result<(), ValidationError> {
        match self {
            ImageRef::Inline { .. } => Ok(()),
            ImageRef::Path(p) => std::fs::File::open(p)
                .and_then(|f| f.metadata())
                .and_then(|m| {
                    if m.is_file() {
                        Ok(())
                    } else {
                        Err(std::io::Error::new(
                            std::io::ErrorKind::InvalidInput,
                            "not a regular file",
                        ))
                    }
                })
                .map_err(|source| ValidationError::UnreadableImage {
                    path: p.clone(),
                    source,
                }),
        }
    }

    /// Relative paths are resolved against `base`.
    pub fn resolved_against(&self, base: &Path) -> ImageRef {
        match self {
            ImageRef::Path(p) if p.is_relative() => ImageRef::Path(base.join(p)),
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    ScienceQa,
    Ai2d,
    Custom,
}

impl FromStr for DatasetKind {
    type Err = ValidationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scienceqa" => Ok(DatasetKind::ScienceQa),
            "ai2d" => Ok(DatasetKind::Ai2d),
            "custom" => Ok(DatasetKind::Custom),
            _ => Err(ValidationError::UnknownValue {
                field: "dataset",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = ValidationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(ValidationError::UnknownValue {
                field: "split",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One multiple-choice item. Serializes to the canonical JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub id: String,
    pub question: String,
    pub image: ImageRef,
    pub options: Vec<String>,
    #[serde(rename = "answer")]
    pub gold_index: usize,
    pub dataset: DatasetKind,
    pub split: Split,
}

impl QuestionInstance {
    pub fn n_options(&self) -> usize {
        self.options.len()
    }

    pub fn gold_text(&self) -> &str {
        &self.options[self.gold_index]
    }
}

/// A not-yet-validated record; every field is optional so that missing
/// fields surface as `MissingField` rather than a generic parse error.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: Option<String>,
    pub question: Option<String>,
    pub image: Option<ImageRef>,
    pub options: Option<Vec<String>>,
    pub answer: Option<i64>,
    pub dataset: Option<String>,
    pub split: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageCheck {
    Require,
    Skip,
}

pub fn validate_instance(
    raw: RawRecord,
    image_check: ImageCheck,
) -> Result<QuestionInstance, ValidationError> {
    let id = raw.id.ok_or(ValidationError::MissingField("id"))?;
    if id.is_empty() {
        return Err(ValidationError::EmptyField { field: "id" });
    }
    let question = raw
        .question
        .ok_or(ValidationError::MissingField("question"))?;
    let image = raw.image.ok_or(ValidationError::MissingField("image"))?;
    if matches!(&image, ImageRef::Path(p) if p.as_os_str().is_empty()) {
        return Err(ValidationError::EmptyField { field: "image" });
    }
    let options = raw
        .options
        .ok_or(ValidationError::MissingField("options"))?;
    let answer = raw.answer.ok_or(ValidationError::MissingField("answer"))?;
    let dataset = raw
        .dataset
        .ok_or(ValidationError::MissingField("dataset"))?
        .parse()?;
    let split = raw
        .split
        .ok_or(ValidationError::MissingField("split"))?
        .parse()?;

    if options.len() < 2 {
        return Err(ValidationError::TooFewOptions(options.len()));
    }
    for (i, opt) in options.iter().enumerate() {
        let trimmed = opt.trim();
        if trimmed.is_empty() {
            return Err(ValidationError::EmptyField { field: "options" });
        }
        if let Some(j) = options[..i].iter().position(|o| o.trim() == trimmed) {
            return Err(ValidationError::DuplicateOption {
                text: trimmed.to_string(),
                first: j,
                second: i,
            });
        }
    }
    if answer < 0 || answer as u64 >= options.len() as u64 {
        return Err(ValidationError::GoldIndexOutOfRange {
            index: answer,
            n: options.len(),
        });
    }
    if image_check == ImageCheck::Require {
        image.check_readable()?;
    }
    Ok(QuestionInstance {
        id,
        question,
        image,
        options,
        gold_index: answer as usize,
        dataset,
        split,
    })
}

/// Scorers that produce one score per option directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseMethod {
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "AVG")]
    Avg,
    Calibration,
    Channel,
    #[serde(rename = "MCP")]
    Mcp,
}

impl BaseMethod {
    pub const ALL: [BaseMethod; 5] = [
        BaseMethod::Lm,
        BaseMethod::Avg,
        BaseMethod::Calibration,
        BaseMethod::Channel,
        BaseMethod::Mcp,
    ];
}

impl fmt::Display for BaseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseMethod::Lm => "LM",
            BaseMethod::Avg => "AVG",
            BaseMethod::Calibration => "Calibration",
            BaseMethod::Channel => "Channel",
            BaseMethod::Mcp => "MCP",
        })
    }
}

impl FromStr for BaseMethod {
    type Err = ValidationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lm" => Ok(BaseMethod::Lm),
            "avg" => Ok(BaseMethod::Avg),
            "calibration" => Ok(BaseMethod::Calibration),
            "channel" => Ok(BaseMethod::Channel),
            "mcp" => Ok(BaseMethod::Mcp),
            _ => Err(ValidationError::UnknownValue {
                field: "method",
                value: s.to_string(),
            }),
        }
    }
}

/// A scoring method. The elimination step's scorer exists only on the
/// two-step variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MethodRepr", into = "MethodRepr")]
pub enum ScoringMethod {
    Base(BaseMethod),
    Poe { step1: BaseMethod },
}

impl ScoringMethod {
    pub const fn poe() -> Self {
        ScoringMethod::Poe {
            step1: BaseMethod::Mcp,
        }
    }

    pub fn is_poe(&self) -> bool {
        matches!(self, ScoringMethod::Poe { .. })
    }

    /// Parses `lm|avg|calibration|channel|mcp|poe`; `step1` is only legal
    /// together with `poe`.
    pub fn parse(name: &str, step1: Option<&str>) -> Result<Self, ValidationError> {
        if name.eq_ignore_ascii_case("poe") {
            let step1 = match step1 {
                Some(s) => s.parse()?,
                None => BaseMethod::Mcp,
            };
            return Ok(ScoringMethod::Poe { step1 });
        }
        if let Some(s) = step1 {
            return Err(ValidationError::UnknownValue {
                field: "step1_method (only valid with poe)",
                value: s.to_string(),
            });
        }
        Ok(ScoringMethod::Base(name.parse()?))
    }
}

impl fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoringMethod::Base(m) => m.fmt(f),
            ScoringMethod::Poe { step1 } => write!(f, "PoE({step1})"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MethodRepr {
    variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step1_method: Option<BaseMethod>,
}

impl From<ScoringMethod> for MethodRepr {
    fn from(m: ScoringMethod) -> Self {
        match m {
            ScoringMethod::Base(b) => MethodRepr {
                variant: b.to_string(),
                step1_method: None,
            },
            ScoringMethod::Poe { step1 } => MethodRepr {
                variant: "PoE".into(),
                step1_method: Some(step1),
            },
        }
    }
}

impl TryFrom<MethodRepr> for ScoringMethod {
    type Error = String;
    fn try_from(r: MethodRepr) -> Result<Self, Self::Error> {
        match (r.variant.as_str(), r.step1_method) {
            ("PoE", Some(step1)) => Ok(ScoringMethod::Poe { step1 }),
            ("PoE", None) => Err("PoE requires step1_method".into()),
            (_, Some(_)) => Err("step1_method is only valid for PoE".into()),
            (v, None) => v
                .parse()
                .map(ScoringMethod::Base)
                .map_err(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("non-finite score {value} at option {index}")]
pub struct NonFiniteScore {
    pub index: usize,
    pub value: f64,
}

/// Per-option scores in natural-log units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    scores: Vec<f64>,
    method: ScoringMethod,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, method: ScoringMethod) -> Result<Self, NonFiniteScore> {
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
            return Err(NonFiniteScore { index, value });
        }
        Ok(Self { scores, method })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn method(&self) -> ScoringMethod {
        self.method
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Index of the maximum score; ties go to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        argmax_lowest(self.scores.iter().copied().enumerate())
    }
}

/// Argmax over `(index, score)` pairs with lowest-index tie-break.
pub fn argmax_lowest(items: impl IntoIterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in items {
        match best {
            Some((bi, bs)) if s < bs || (s == bs && i > bi) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Per-option keep bits; `false` marks an eliminated option.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Mask(bits)
    }

    pub fn all(n: usize) -> Self {
        Mask(vec![true; n])
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Mask(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        self.0.get(i).copied()
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn survivors(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }
}

impl Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&b| b as u8))
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bits = Vec::<u8>::deserialize(d)?;
        if bits.iter().any(|&b| b > 1) {
            return Err(serde::de::Error::custom("mask bits must be 0 or 1"));
        }
        Ok(Mask::from_bits(&bits))
    }
}

/// Result of the elimination step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationOutcome {
    pub score_vector: ScoreVector,
    pub mean_score: f64,
    pub mask: Mask,
    pub eliminated_indices: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Segment {
    Text { text: String },
    Image { image: ImageRef },
}

impl Segment {
    pub fn text(s: impl Into<String>) -> Self {
        Segment::Text { text: s.into() }
    }
}

/// Ordered text/image segments plus the continuation whose conditional
/// log-probability is requested.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub segments: Vec<Segment>,
    pub continuation: String,
}

impl PromptParts {
    /// Appends segments, merging adjacent text runs.
    pub fn push(&mut self, seg: Segment) {
        match (self.segments.last_mut(), seg) {
            (Some(Segment::Text { text: last }), Segment::Text { text }) => last.push_str(&text),
            (_, seg) => self.segments.push(seg),
        }
    }

    pub fn push_text(&mut self, s: &str) {
        if !s.is_empty() {
            self.push(Segment::text(s));
        }
    }

    pub fn image_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Image { .. }))
            .count()
    }

    /// Prompt text with each image replaced by [`IMAGE_PLACEHOLDER`].
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text { text } => out.push_str(text),
                Segment::Image { .. } => out.push_str(IMAGE_PLACEHOLDER),
            }
        }
        out
    }
}

/// Two-step outcome for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub step1: EliminationOutcome,
    pub masked_prompt_preview: String,
    pub step2_scores: Vec<(usize, f64)>,
    pub predicted_index: usize,
    pub short_circuited: bool,
}
