use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendCapabilities, BackendError, ContinuationScore, ScorerBackend, TokenLogprob};
use crate::types::PromptParts;

const FALLBACK_MIN: f64 = -10.0;
const FALLBACK_MAX: f64 = -0.1;

/// One pinned score: prompt text (images as placeholders), continuation,
/// and the per-token logprobs to report for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub prompt: String,
    pub continuation: String,
    pub token_logprobs: Vec<f64>,
}

/// Table of pinned scores, serialized as `{"entries": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    pub entries: Vec<FixtureEntry>,
}

impl MockFixture {
    /// Pins `parts` to the given per-token logprobs, replacing any previous
    /// entry with the same key.
    pub fn insert(&mut self, parts: &PromptParts, token_logprobs: Vec<f64>) {
        let prompt = parts.render_text();
        if let Some(e) = self
            .entries
            .iter_mut()
            .find(|e| e.prompt == prompt && e.continuation == parts.continuation)
        {
            e.token_logprobs = token_logprobs;
            return;
        }
        self.entries.push(FixtureEntry {
            prompt,
            continuation: parts.continuation.clone(),
            token_logprobs,
        });
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::from)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// Deterministic backend: fixture lookups first, then a seeded hash.
#[derive(Debug, Clone)]
pub struct MockBackend {
    table: HashMap<(String, String), Vec<f64>>,
    seed: u64,
    capabilities: BackendCapabilities,
}

impl MockBackend {
    pub fn new(fixture: Option<&MockFixture>, seed: u64) -> Self {
        let table = fixture
            .map(|f| {
                f.entries
                    .iter()
                    .map(|e| {
                        (
                            (e.prompt.clone(), e.continuation.clone()),
                            e.token_logprobs.clone(),
                        )
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            table,
            seed,
            capabilities: BackendCapabilities {
                supports_images: true,
                max_images_per_request: 16,
                supports_per_token: true,
            },
        }
    }

    pub fn with_capabilities(mut self, capabilities: BackendCapabilities) -> Self {
        self.capabilities = capabilities;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Hash of `(prompt, continuation, seed)` mapped uniformly onto
    /// `[-10, -0.1]`.
    pub fn fallback_logprob(&self, prompt: &str, continuation: &str) -> f64 {
        let mut h = Sha256::new();
        h.update((prompt.len() as u64).to_le_bytes());
        h.update(prompt.as_bytes());
        h.update((continuation.len() as u64).to_le_bytes());
        h.update(continuation.as_bytes());
        h.update(self.seed.to_le_bytes());
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        // 53 high bits give an exactly representable unit fraction.
        let unit = (u64::from_le_bytes(word) >> 11) as f64 / ((1u64 << 53) - 1) as f64;
        FALLBACK_MIN + unit * (FALLBACK_MAX - FALLBACK_MIN)
    }
}

fn whitespace_tokens(s: &str) -> usize {
    s.split_whitespace().count().max(1)
}

impl ScorerBackend for MockBackend {
    fn capabilities(&self) -> BackendCapabilities {
        self.capabilities
    }

    fn score_continuation(&self, parts: &PromptParts) -> Result<ContinuationScore, BackendError> {
        self.capabilities.check(parts)?;
        let prompt = parts.render_text();
        let key = (prompt, parts.continuation.clone());
        if let Some(values) = self.table.get(&key) {
            let words: Vec<&str> = parts.continuation.split_whitespace().collect();
            let tokens = values
                .iter()
                .enumerate()
                .map(|(i, &logprob)| TokenLogprob {
                    token: if words.len() == values.len() {
                        words[i].to_string()
                    } else {
                        format!("<{i}>")
                    },
                    logprob,
                })
                .collect();
            return ContinuationScore::from_tokens(tokens);
        }
        Ok(ContinuationScore {
            sum_logprob: self.fallback_logprob(&key.0, &key.1),
            token_count: whitespace_tokens(&parts.continuation),
            per_token: None,
        })
    }
}
