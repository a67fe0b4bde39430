//! Canonical JSONL I/O, dataset converters, and few-shot demo sampling.
//!
//! The canonical record is one JSON object per line:
//! `{"id","question","image","options","answer","dataset","split"}`.
//!
//! Converters read the publicly distributed layouts:
//!
//! * ScienceQA: a directory holding `problems.json` (an object keyed by
//!   problem id, each with `question`, `choices`, `answer`, `image`,
//!   `split`), with images under `images/<split>/<id>/<image>` or
//!   `<split>/<id>/<image>`. Source split `val` becomes `dev`.
//! * AI2D: a directory holding `questions/<n>.json` (one per diagram, with
//!   `imageName` and a `questions` object whose entries carry
//!   `answerTexts`, `correctAnswer`, `questionId`) and `images/<n>.png`.
//!   Diagrams listed in `ai2d_test_ids.csv` become `dev`; all others are
//!   `train`.
//!
//! Only records with an existing image and exactly four options are kept.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{
    validate_instance, DatasetKind, ImageCheck, ImageRef, QuestionInstance, RawRecord, Split,
    ValidationError,
};

/// Option count kept by the standardization filter.
pub const REQUIRED_OPTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    UnreadableInput {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    UnwritableOutput {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {source}")]
    InvalidRecord {
        path: PathBuf,
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("demo pool has {available} eligible instance(s), {requested} requested")]
    InsufficientPool { available: usize, requested: usize },
}

/// Reads canonical JSONL. Relative image paths resolve against the file's
/// directory.
pub fn load_jsonl(
    path: &Path,
    image_check: ImageCheck,
) -> Result<Vec<QuestionInstance>, DatasetError> {
    let unreadable = |source| DatasetError::UnreadableInput {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(unreadable)?);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(unreadable)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        raw.image = raw.image.map(|img| img.resolved_against(base));
        let inst =
            validate_instance(raw, image_check).map_err(|source| DatasetError::InvalidRecord {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
        if !seen.insert(inst.id.clone()) {
            return Err(DatasetError::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    Ok(out)
}

/// Writes canonical JSONL, one LF-terminated record per line.
pub fn write_jsonl<'a>(
    path: &Path,
    instances: impl IntoIterator<Item = &'a QuestionInstance>,
) -> Result<(), DatasetError> {
    let unwritable = |source| DatasetError::UnwritableOutput {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(unwritable)?);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instances always serialize");
        w.write_all(line.as_bytes()).map_err(unwritable)?;
        w.write_all(b"\n").map_err(unwritable)?;
    }
    w.flush().map_err(unwritable)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionStats {
    pub read: usize,
    pub kept: usize,
    pub dropped_no_image: usize,
    pub dropped_option_count: usize,
    pub dropped_invalid: usize,
    pub kept_by_split: BTreeMap<Split, usize>,
}

impl ConversionStats {
    pub fn is_balanced(&self) -> bool {
        self.read
            == self.kept + self.dropped_no_image + self.dropped_option_count + self.dropped_invalid
    }
}

enum Verdict {
    Keep(QuestionInstance),
    NoImage,
    OptionCount,
    Invalid,
}

/// Fields common to both source layouts, after format-specific parsing.
struct Candidate {
    id: String,
    question: String,
    options: Vec<String>,
    answer: i64,
    image: Option<PathBuf>,
    split: Split,
    dataset: DatasetKind,
}

fn judge(c: Option<Candidate>) -> Verdict {
    let Some(c) = c else {
        return Verdict::Invalid;
    };
    let Some(image) = c.image.filter(|p| p.is_file()) else {
        return Verdict::NoImage;
    };
    if c.options.len() != REQUIRED_OPTIONS {
        return Verdict::OptionCount;
    }
    let raw = RawRecord {
        id: Some(c.id),
        question: Some(c.question),
        image: Some(ImageRef::Path(image)),
        options: Some(c.options),
        answer: Some(c.answer),
        dataset: Some(
            match c.dataset {
                DatasetKind::ScienceQa => "scienceqa",
                DatasetKind::Ai2d => "ai2d",
                DatasetKind::Custom => "custom",
            }
            .into(),
        ),
        split: Some(c.split.to_string()),
    };
    match validate_instance(raw, ImageCheck::Skip) {
        Ok(inst) => Verdict::Keep(inst),
        Err(_) => Verdict::Invalid,
    }
}

fn run_conversion(
    candidates: impl Iterator<Item = Option<Candidate>>,
    output: &Path,
) -> Result<ConversionStats, DatasetError> {
    let mut stats = ConversionStats::default();
    let mut kept = Vec::new();
    let mut ids = HashSet::new();
    for c in candidates {
        stats.read += 1;
        match judge(c) {
            Verdict::Keep(inst) if ids.insert(inst.id.clone()) => {
                stats.kept += 1;
                *stats.kept_by_split.entry(inst.split).or_default() += 1;
                kept.push(inst);
            }
            Verdict::Keep(_) | Verdict::Invalid => stats.dropped_invalid += 1,
            Verdict::NoImage => stats.dropped_no_image += 1,
            Verdict::OptionCount => stats.dropped_option_count += 1,
        }
    }
    write_jsonl(output, &kept)?;
    Ok(stats)
}

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::UnreadableInput {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::MalformedRecord {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_str().map(str::to_string))
        .collect()
}

fn scienceqa_split(s: &str) -> Option<(Split, &str)> {
    match s {
        "train" => Some((Split::Train, s)),
        "val" | "dev" | "validation" => Some((Split::Dev, s)),
        "test" => Some((Split::Test, s)),
        _ => None,
    }
}

fn scienceqa_candidate(base: &Path, id: &str, rec: &Value) -> Option<Candidate> {
    let question = rec.get("question")?.as_str()?.to_string();
    let options = string_list(rec.get("choices")?)?;
    let answer = rec.get("answer")?.as_i64()?;
    let (split, source_split) = scienceqa_split(rec.get("split")?.as_str()?)?;
    let image = match rec.get("image") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let name = v.as_str()?;
            if name.is_empty() {
                None
            } else {
                let nested = base.join("images").join(source_split).join(id).join(name);
                let flat = base.join(source_split).join(id).join(name);
                Some(if !nested.is_file() && flat.is_file() {
                    flat
                } else {
                    nested
                })
            }
        }
    };
    Some(Candidate {
        id: id.to_string(),
        question,
        options,
        answer,
        image,
        split,
        dataset: DatasetKind::ScienceQa,
    })
}

/// Converts a ScienceQA `problems.json` (or the directory holding it).
pub fn convert_scienceqa(input: &Path, output: &Path) -> Result<ConversionStats, DatasetError> {
    let (problems, base) = if input.is_dir() {
        (input.join("problems.json"), input.to_path_buf())
    } else {
        (
            input.to_path_buf(),
            input.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )
    };
    let doc = read_json(&problems)?;
    let Value::Object(map) = doc else {
        return Err(DatasetError::MalformedRecord {
            path: problems,
            line: 1,
            message: "expected an object keyed by problem id".into(),
        });
    };
    run_conversion(
        map.iter()
            .map(|(id, rec)| scienceqa_candidate(&base, id, rec)),
        output,
    )
}

fn numeric_stem_key(p: &Path) -> (u64, String) {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    (stem.parse().unwrap_or(u64::MAX), stem.to_string())
}

fn read_test_ids(path: &Path) -> Result<HashSet<String>, DatasetError> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text
            .lines()
            .flat_map(|l| l.split(','))
            .map(|s| s.trim().trim_end_matches(".png").to_string())
            .filter(|s| !s.is_empty())
            .collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(HashSet::new()),
        Err(source) => Err(DatasetError::UnreadableInput {
            path: path.to_path_buf(),
            source,
        }),
    }
}

fn ai2d_candidates(base: &Path, file: &Path, test_ids: &HashSet<String>) -> Vec<Option<Candidate>> {
    let Ok(doc) = read_json(file) else {
        return vec![None];
    };
    let Some(questions) = doc.get("questions").and_then(Value::as_object) else {
        return vec![None];
    };
    let image_name = doc.get("imageName").and_then(Value::as_str);
    let image = image_name
        .filter(|n| !n.is_empty())
        .map(|n| base.join("images").join(n));
    let diagram = image_name
        .map(|n| n.trim_end_matches(".png").to_string())
        .unwrap_or_else(|| numeric_stem_key(file).1);
    let split = if test_ids.contains(&diagram) {
        Split::Dev
    } else {
        Split::Train
    };
    questions
        .iter()
        .map(|(text, q)| {
            Some(Candidate {
                id: q.get("questionId")?.as_str()?.to_string(),
                question: text.clone(),
                options: string_list(q.get("answerTexts")?)?,
                answer: q.get("correctAnswer")?.as_i64()?,
                image: image.clone(),
                split,
                dataset: DatasetKind::Ai2d,
            })
        })
        .collect()
}

/// Converts an AI2D distribution directory.
pub fn convert_ai2d(input: &Path, output: &Path) -> Result<ConversionStats, DatasetError> {
    let qdir = input.join("questions");
    let entries = std::fs::read_dir(&qdir).map_err(|source| DatasetError::UnreadableInput {
        path: qdir.clone(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort_by_key(|p| numeric_stem_key(p));
    let test_ids = read_test_ids(&input.join("ai2d_test_ids.csv"))?;
    let candidates: Vec<Option<Candidate>> = files
        .iter()
        .flat_map(|f| ai2d_candidates(input, f, &test_ids))
        .collect();
    run_conversion(candidates.into_iter(), output)
}

/// Draws `n_shot` demonstrations without replacement from a seeded
/// permutation of `pool`, skipping `exclude_id`.
pub fn sample_demos(
    pool: &[QuestionInstance],
    n_shot: usize,
    seed: u64,
    exclude_id: &str,
) -> Result<Vec<QuestionInstance>, DatasetError> {
    if n_shot == 0 {
        return Ok(Vec::new());
    }
    let eligible = pool.iter().filter(|q| q.id != exclude_id).count();
    if eligible < n_shot {
        return Err(DatasetError::InsufficientPool {
            available: eligible,
            requested: n_shot,
        });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .into_iter()
        .map(|i| &pool[i])
        .filter(|q| q.id != exclude_id)
        .take(n_shot)
        .cloned()
        .collect())
}

/// Per-instance sampling seed derived from the run seed and instance id.
pub fn demo_seed(run_seed: u64, instance_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(instance_id.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&h.finalize()[..8]);
    u64::from_le_bytes(word)
}
