//! Conditional log-probability providers.
//!
//! A backend answers one question: what is `log P(continuation | segments)`
//! in natural-log units, and over how many tokens. Everything else in the
//! harness is built on top of [`ScorerBackend::score_continuation`].

mod mock;
mod network;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::PromptParts;

pub use mock::{FixtureEntry, MockBackend, MockFixture};
pub use network::{
    NetworkBackend, NetworkConfig, ScoreRequest, ScoreResponse, WireSegment, ENDPOINT_ENV,
};

/// Tolerance for per-token logprobs summing to the reported total.
pub const LOG_UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("prompt has {images} image(s); backend accepts at most {max}")]
    CapabilityExceeded { images: usize, max: usize },
    #[error("transport failure after {attempts} attempt(s) for continuation {continuation:?}: {message}")]
    TransportFailure {
        attempts: usize,
        continuation: String,
        message: String,
    },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("non-finite logprob {value} at token {index}")]
    NonFiniteLogprob { index: usize, value: f64 },
    #[error("image could not be read: {0}")]
    Image(#[source] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Log-probability of a continuation, natural-log units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationScore {
    pub sum_logprob: f64,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<TokenLogprob>>,
}

impl ContinuationScore {
    /// Builds a score from per-token values, summing them in order.
    pub fn from_tokens(tokens: Vec<TokenLogprob>) -> Result<Self, BackendError> {
        if tokens.is_empty() {
            return Err(BackendError::MalformedResponse(
                "continuation scored over zero tokens".into(),
            ));
        }
        if let Some((index, t)) = tokens
            .iter()
            .enumerate()
            .find(|(_, t)| !t.logprob.is_finite())
        {
            return Err(BackendError::NonFiniteLogprob {
                index,
                value: t.logprob,
            });
        }
        let sum_logprob = tokens.iter().map(|t| t.logprob).sum();
        Ok(Self {
            sum_logprob,
            token_count: tokens.len(),
            per_token: Some(tokens),
        })
    }

    /// Self-test: token count is positive, values are finite, and any
    /// per-token breakdown sums to the total.
    pub fn verify(&self) -> Result<(), BackendError> {
        if self.token_count == 0 {
            return Err(BackendError::MalformedResponse(
                "token_count is zero".into(),
            ));
        }
        if !self.sum_logprob.is_finite() {
            return Err(BackendError::NonFiniteLogprob {
                index: 0,
                value: self.sum_logprob,
            });
        }
        if let Some(tokens) = &self.per_token {
            if tokens.len() != self.token_count {
                return Err(BackendError::MalformedResponse(format!(
                    "{} per-token entries for token_count {}",
                    tokens.len(),
                    self.token_count
                )));
            }
            let sum: f64 = tokens.iter().map(|t| t.logprob).sum();
            if (sum - self.sum_logprob).abs() > LOG_UNIT_TOLERANCE {
                return Err(BackendError::MalformedResponse(format!(
                    "per-token sum {sum} differs from total {}",
                    self.sum_logprob
                )));
            }
        }
        Ok(())
    }

    pub fn mean_logprob(&self) -> f64 {
        self.sum_logprob / self.token_count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub supports_images: bool,
    pub max_images_per_request: usize,
    pub supports_per_token: bool,
}

impl BackendCapabilities {
    pub fn check(&self, parts: &PromptParts) -> Result<(), BackendError> {
        let images = parts.image_count();
        let max = if self.supports_images {
            self.max_images_per_request
        } else {
            0
        };
        if images > max {
            return Err(BackendError::CapabilityExceeded { images, max });
        }
        Ok(())
    }
}

/// A conditional log-probability provider. Implementations must tolerate
/// concurrent calls.
pub trait ScorerBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    fn score_continuation(&self, parts: &PromptParts) -> Result<ContinuationScore, BackendError>;
}

impl<B: ScorerBackend + ?Sized> ScorerBackend for &B {
    fn capabilities(&self) -> BackendCapabilities {
        (**self).capabilities()
    }

    fn score_continuation(&self, parts: &PromptParts) -> Result<ContinuationScore, BackendError> {
        (**self).score_continuation(parts)
    }
}

impl<B: ScorerBackend + ?Sized> ScorerBackend for Box<B> {
    fn capabilities(&self) -> BackendCapabilities {
        (**self).capabilities()
    }

    fn score_continuation(&self, parts: &PromptParts) -> Result<ContinuationScore, BackendError> {
        (**self).score_continuation(parts)
    }
}

/// Wraps a backend and counts `score_continuation` calls.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ScorerBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) -> usize {
        self.calls.swap(0, Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ScorerBackend> ScorerBackend for CountingBackend<B> {
    fn capabilities(&self) -> BackendCapabilities {
        self.inner.capabilities()
    }

    fn score_continuation(&self, parts: &PromptParts) -> Result<ContinuationScore, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score_continuation(parts)
    }
}
