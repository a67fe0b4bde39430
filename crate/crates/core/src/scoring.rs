//! Baseline scorers and the two-step elimination/prediction procedure.
//!
//! Every scorer is a composition of a template renderer and backend calls.
//! Per-option calls run concurrently on the rayon pool; results are
//! assembled by option index so the outcome does not depend on completion
//! order.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ContinuationScore, ScorerBackend};
use crate::templating::{self, RenderedPrompt, TemplateError};
use crate::types::{
    argmax_lowest, BaseMethod, EliminationOutcome, Mask, NonFiniteScore, PredictionOutcome,
    QuestionInstance, ScoreVector, ScoringMethod,
};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend failed on option {option_index}: {source}")]
    Backend {
        option_index: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    NonFiniteScore(#[from] NonFiniteScore),
    #[error("elimination needs at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("demonstration {id:?} comes from the query's own {split} split")]
    DemoSplitOverlap {
        id: String,
        split: crate::types::Split,
    },
    #[error("demonstration {0:?} is the query instance itself")]
    DemoIsQuery(String),
    #[error("method {0} cannot be used here")]
    WrongMethod(ScoringMethod),
}

/// Everything a scorer needs for one query instance.
#[derive(Clone, Copy)]
pub struct MethodContext<'a> {
    pub instance: &'a QuestionInstance,
    pub demos: &'a [QuestionInstance],
    pub backend: &'a dyn ScorerBackend,
    pub method: ScoringMethod,
}

impl<'a> MethodContext<'a> {
    /// Demonstrations from the same dataset must come from a different split
    /// than the query.
    pub fn new(
        instance: &'a QuestionInstance,
        demos: &'a [QuestionInstance],
        backend: &'a dyn ScorerBackend,
        method: ScoringMethod,
    ) -> Result<Self, ScoringError> {
        for d in demos {
            if d.id == instance.id {
                return Err(ScoringError::DemoIsQuery(d.id.clone()));
            }
            if d.dataset == instance.dataset && d.split == instance.split {
                return Err(ScoringError::DemoSplitOverlap {
                    id: d.id.clone(),
                    split: d.split,
                });
            }
        }
        Ok(Self {
            instance,
            demos,
            backend,
            method,
        })
    }

    fn n(&self) -> usize {
        self.instance.n_options()
    }

    fn call(&self, prompt: &RenderedPrompt) -> Result<ContinuationScore, ScoringError> {
        let score = self
            .backend
            .score_continuation(&prompt.parts)
            .map_err(|source| ScoringError::Backend {
                option_index: prompt.option_index,
                source,
            })?;
        if !score.sum_logprob.is_finite() {
            return Err(NonFiniteScore {
                index: prompt.option_index,
                value: score.sum_logprob,
            }
            .into());
        }
        Ok(score)
    }

    /// Renders and scores one prompt per listed option, in parallel.
    fn fan_out<F>(
        &self,
        indices: &[usize],
        render: F,
    ) -> Result<Vec<ContinuationScore>, ScoringError>
    where
        F: Fn(usize) -> Result<RenderedPrompt, TemplateError> + Sync,
    {
        indices
            .par_iter()
            .map(|&i| self.call(&render(i)?))
            .collect()
    }

    fn all_indices(&self) -> Vec<usize> {
        (0..self.n()).collect()
    }
}

fn vector(scores: Vec<f64>, method: BaseMethod) -> Result<ScoreVector, ScoringError> {
    Ok(ScoreVector::new(scores, ScoringMethod::Base(method))?)
}

/// `log P(y_i | x, h)`: total logprob of each option text.
pub fn score_lm(ctx: &MethodContext) -> Result<ScoreVector, ScoringError> {
    let raw = ctx.fan_out(&ctx.all_indices(), |i| {
        templating::render_lm(ctx.instance, i, ctx.demos)
    })?;
    vector(raw.iter().map(|s| s.sum_logprob).collect(), BaseMethod::Lm)
}

/// LM score divided by the option's token count.
pub fn score_avg(ctx: &MethodContext) -> Result<ScoreVector, ScoringError> {
    let raw = ctx.fan_out(&ctx.all_indices(), |i| {
        templating::render_lm(ctx.instance, i, ctx.demos)
    })?;
    vector(
        raw.iter().map(|s| s.mean_logprob()).collect(),
        BaseMethod::Avg,
    )
}

/// LM score minus the same option's score under a content-free question.
pub fn score_calibration(ctx: &MethodContext) -> Result<ScoreVector, ScoringError> {
    let n = ctx.n();
    // Jobs 0..n are the real prompts, n..2n the content-free ones.
    let jobs: Vec<usize> = (0..2 * n).collect();
    let raw = ctx.fan_out(&jobs, |j| {
        templating::render_calibration(ctx.instance, j % n, ctx.demos, j >= n)
    })?;
    let (real, free) = raw.split_at(n);
    vector(
        real.iter()
            .zip(free)
            .map(|(r, f)| r.sum_logprob - f.sum_logprob)
            .collect(),
        BaseMethod::Calibration,
    )
}

/// `log P(x | y_i, h)`: likelihood of the question given each option.
pub fn score_channel(ctx: &MethodContext) -> Result<ScoreVector, ScoringError> {
    let raw = ctx.fan_out(&ctx.all_indices(), |i| {
        templating::render_channel(ctx.instance, i, ctx.demos)
    })?;
    vector(
        raw.iter().map(|s| s.sum_logprob).collect(),
        BaseMethod::Channel,
    )
}

/// Letter-label logprob within a prompt that lists every option. With a
/// mask, only surviving options are scored and the prompt is the masked
/// prediction-step variant.
pub fn score_mcp(
    ctx: &MethodContext,
    mask: Option<&Mask>,
) -> Result<Vec<(usize, f64)>, ScoringError> {
    let indices: Vec<usize> = match mask {
        Some(m) => m.survivors().collect(),
        None => ctx.all_indices(),
    };
    let raw = ctx.fan_out(&indices, |i| {
        templating::render_mcp(ctx.instance, i, mask, ctx.demos)
    })?;
    Ok(indices
        .into_iter()
        .zip(raw)
        .map(|(i, s)| (i, s.sum_logprob))
        .collect())
}

/// Full score vector for a single-step scorer.
pub fn score_base(ctx: &MethodContext, method: BaseMethod) -> Result<ScoreVector, ScoringError> {
    match method {
        BaseMethod::Lm => score_lm(ctx),
        BaseMethod::Avg => score_avg(ctx),
        BaseMethod::Calibration => score_calibration(ctx),
        BaseMethod::Channel => score_channel(ctx),
        BaseMethod::Mcp => vector(
            score_mcp(ctx, None)?.into_iter().map(|(_, s)| s).collect(),
            BaseMethod::Mcp,
        ),
    }
}

/// Arithmetic mean with compensated summation, clamped to `[min, max]` so
/// that rounding can never push it above every score.
fn mean(scores: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &s in scores {
        let t = sum + s;
        if sum.abs() >= s.abs() {
            comp += (sum - t) + s;
        } else {
            comp += (s - t) + sum;
        }
        sum = t;
    }
    let m = (sum + comp) / scores.len() as f64;
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    m.clamp(lo, hi)
}

/// Eliminates every option scoring strictly below the mean score.
pub fn eliminate(scores: &ScoreVector) -> Result<EliminationOutcome, ScoringError> {
    let s = scores.scores();
    if s.len() < 2 {
        return Err(ScoringError::TooFewScores(s.len()));
    }
    if let Some((index, &value)) = s.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(NonFiniteScore { index, value }.into());
    }
    let mean_score = mean(s);
    let bits: Vec<bool> = s.iter().map(|&v| v >= mean_score).collect();
    let eliminated_indices: BTreeSet<usize> = bits
        .iter()
        .enumerate()
        .filter(|(_, &keep)| !keep)
        .map(|(i, _)| i)
        .collect();
    Ok(EliminationOutcome {
        score_vector: scores.clone(),
        mean_score,
        mask: Mask::new(bits),
        eliminated_indices,
    })
}

/// Scores all options with the elimination scorer, masks the below-mean
/// ones, then re-scores the survivors in the masked prompt and returns the
/// best survivor. A single survivor is returned without a second pass.
pub fn predict_poe(ctx: &MethodContext) -> Result<PredictionOutcome, ScoringError> {
    let ScoringMethod::Poe { step1 } = ctx.method else {
        return Err(ScoringError::WrongMethod(ctx.method));
    };
    let step1 = eliminate(&score_base(ctx, step1)?)?;
    let mask = &step1.mask;
    let first_survivor = mask
        .survivors()
        .next()
        .expect("the maximum score always survives elimination");
    let masked_prompt_preview =
        templating::render_mcp(ctx.instance, first_survivor, Some(mask), ctx.demos)?
            .parts
            .render_text();

    if mask.popcount() == 1 {
        return Ok(PredictionOutcome {
            predicted_index: first_survivor,
            step1,
            masked_prompt_preview,
            step2_scores: Vec::new(),
            short_circuited: true,
        });
    }

    let step2_scores = score_mcp(ctx, Some(mask))?;
    if let Some(&(index, value)) = step2_scores.iter().find(|(_, v)| !v.is_finite()) {
        return Err(NonFiniteScore { index, value }.into());
    }
    let predicted_index =
        argmax_lowest(step2_scores.iter().copied()).expect("at least two survivors were scored");
    Ok(PredictionOutcome {
        step1,
        masked_prompt_preview,
        step2_scores,
        predicted_index,
        short_circuited: false,
    })
}

/// Outcome of running any method on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MethodOutcome {
    Baseline {
        scores: ScoreVector,
        predicted_index: usize,
    },
    Poe(PredictionOutcome),
}

impl MethodOutcome {
    pub fn predicted_index(&self) -> usize {
        match self {
            MethodOutcome::Baseline {
                predicted_index, ..
            } => *predicted_index,
            MethodOutcome::Poe(p) => p.predicted_index,
        }
    }
}

/// Runs `ctx.method` end to end.
pub fn predict(ctx: &MethodContext) -> Result<MethodOutcome, ScoringError> {
    match ctx.method {
        ScoringMethod::Base(m) => {
            let scores = score_base(ctx, m)?;
            let predicted_index = scores.argmax().ok_or(ScoringError::TooFewScores(0))?;
            Ok(MethodOutcome::Baseline {
                scores,
                predicted_index,
            })
        }
        ScoringMethod::Poe { .. } => predict_poe(ctx).map(MethodOutcome::Poe),
    }
}
