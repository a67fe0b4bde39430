//! Two-step process-of-elimination scoring for multiple-choice visual
//! question answering, with the usual single-pass baselines (LM, AVG,
//! calibration, channel, multiple-choice prompting) for comparison.
//!
//! The pipeline is: canonical JSONL instances ([`datasets`]) are rendered
//! into prompts ([`templating`]), scored by a log-probability provider
//! ([`backend`]), turned into predictions ([`scoring`]), and summarized
//! ([`metrics`]). [`runner`] ties these together over several seeds and
//! [`cli`] exposes them as the `poe` binary.

pub mod backend;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod fixtures;
pub mod metrics;
pub mod runner;
pub mod scoring;
pub mod templating;
pub mod types;

pub use backend::{ContinuationScore, MockBackend, NetworkBackend, ScorerBackend};
pub use scoring::{eliminate, predict, predict_poe, MethodContext, MethodOutcome};
pub use types::{
    BaseMethod, EliminationOutcome, ImageRef, Mask, PredictionOutcome, PromptParts,
    QuestionInstance, ScoreVector, ScoringMethod,
};
