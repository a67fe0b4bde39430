use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendCapabilities, BackendError, ContinuationScore, ScorerBackend, TokenLogprob};
use crate::types::{PromptParts, Segment};

pub const ENDPOINT_ENV: &str = "POE_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WireSegment {
    Text {
        text: String,
    },
    Image {
        media_type: String,
        data_base64: String,
    },
}

/// Request body: prompt segments and the continuation to score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub segments: Vec<WireSegment>,
    pub continuation: String,
}

impl ScoreRequest {
    pub fn from_parts(parts: &PromptParts) -> Result<Self, BackendError> {
        let segments = parts
            .segments
            .iter()
            .map(|seg| match seg {
                Segment::Text { text } => Ok(WireSegment::Text { text: text.clone() }),
                Segment::Image { image } => Ok(WireSegment::Image {
                    media_type: image.media_type(),
                    data_base64: image.to_base64().map_err(BackendError::Image)?,
                }),
            })
            .collect::<Result<_, BackendError>>()?;
        Ok(Self {
            segments,
            continuation: parts.continuation.clone(),
        })
    }
}

/// Response body: continuation tokens and their natural-log probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
}

impl ScoreResponse {
    pub fn into_score(self) -> Result<ContinuationScore, BackendError> {
        if self.tokens.len() != self.token_logprobs.len() {
            return Err(BackendError::MalformedResponse(format!(
                "{} tokens but {} logprobs",
                self.tokens.len(),
                self.token_logprobs.len()
            )));
        }
        let score = ContinuationScore::from_tokens(
            self.tokens
                .into_iter()
                .zip(self.token_logprobs)
                .map(|(token, logprob)| TokenLogprob { token, logprob })
                .collect(),
        )?;
        score.verify()?;
        Ok(score)
    }
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub endpoint: String,
    pub max_parallel: usize,
    pub timeout: Duration,
    /// Extra attempts after the first transport failure.
    pub retries: usize,
    pub backoff_base: Duration,
    pub capabilities: BackendCapabilities,
}

impl NetworkConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            max_parallel: 4,
            timeout: Duration::from_secs(120),
            retries: 2,
            backoff_base: Duration::from_millis(500),
            capabilities: BackendCapabilities {
                supports_images: true,
                max_images_per_request: 16,
                supports_per_token: true,
            },
        }
    }
}

struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
    peak: AtomicUsize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// HTTP client for the JSON scoring protocol. One POST per continuation.
pub struct NetworkBackend {
    agent: ureq::Agent,
    config: NetworkConfig,
    gate: Gate,
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl NetworkBackend {
    pub fn new(config: NetworkConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let limit = config.max_parallel.max(1);
        Self {
            agent,
            config,
            gate: Gate {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit,
                peak: AtomicUsize::new(0),
            },
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Highest number of simultaneously outstanding requests observed.
    pub fn peak_in_flight(&self) -> usize {
        self.gate.peak.load(Ordering::SeqCst)
    }

    fn attempt(&self, body: &ScoreRequest) -> Result<ContinuationScore, Attempt> {
        let resp = match self.agent.post(&self.config.endpoint).send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => {
                return Err(Attempt::Retry(format!("HTTP status {code}")))
            }
            Err(e) => return Err(Attempt::Retry(e.to_string())),
        };
        if resp.status() != 200 {
            return Err(Attempt::Retry(format!("HTTP status {}", resp.status())));
        }
        let text = resp
            .into_string()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        let parsed: ScoreResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::MalformedResponse(e.to_string())))?;
        parsed.into_score().map_err(Attempt::Fatal)
    }
}

impl ScorerBackend for NetworkBackend {
    fn capabilities(&self) -> BackendCapabilities {
        self.config.capabilities
    }

    fn score_continuation(&self, parts: &PromptParts) -> Result<ContinuationScore, BackendError> {
        self.config.capabilities.check(parts)?;
        let body = ScoreRequest::from_parts(parts)?;
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff_base * (1u32 << (attempt - 1).min(16)));
            }
            let result = {
                let _permit = self.gate.acquire();
                self.attempt(&body)
            };
            match result {
                Ok(score) => return Ok(score),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(BackendError::TransportFailure {
            attempts,
            continuation: parts.continuation.clone(),
            message: format!("{} ({last})", self.config.endpoint),
        })
    }
}
