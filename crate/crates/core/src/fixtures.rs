//! Builders for mock-backend score tables.
//!
//! A pinned fixture renders every prompt a method will issue for a set of
//! zero-shot instances and assigns each one a chosen single-token logprob,
//! so that downstream predictions are fully determined by the caller.

use crate::backend::MockFixture;
use crate::scoring::{eliminate, ScoringError};
use crate::templating::{self, TemplateError};
use crate::types::{BaseMethod, Mask, QuestionInstance, ScoreVector, ScoringMethod};

/// Which pass a pinned value is requested for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// The only pass of a baseline method, or the elimination pass.
    Score,
    /// The masked re-scoring pass of the two-step method.
    Predict,
}

/// Logprob pinned on every content-free calibration prompt.
pub const CONTENT_FREE_LOGPROB: f64 = -5.0;

fn pin_base<F>(
    fx: &mut MockFixture,
    instance: &QuestionInstance,
    method: BaseMethod,
    value: &F,
) -> Result<Vec<f64>, TemplateError>
where
    F: Fn(&QuestionInstance, usize, Stage) -> f64,
{
    let mut scores = Vec::with_capacity(instance.n_options());
    for i in 0..instance.n_options() {
        let v = value(instance, i, Stage::Score);
        let parts = match method {
            BaseMethod::Lm | BaseMethod::Avg => templating::render_lm(instance, i, &[])?.parts,
            BaseMethod::Calibration => {
                let free = templating::render_calibration(instance, i, &[], true)?;
                fx.insert(&free.parts, vec![CONTENT_FREE_LOGPROB]);
                templating::render_calibration(instance, i, &[], false)?.parts
            }
            BaseMethod::Channel => templating::render_channel(instance, i, &[])?.parts,
            BaseMethod::Mcp => templating::render_mcp(instance, i, None, &[])?.parts,
        };
        fx.insert(&parts, vec![v]);
        scores.push(match method {
            BaseMethod::Calibration => v - CONTENT_FREE_LOGPROB,
            _ => v,
        });
    }
    Ok(scores)
}

/// Adds entries for every prompt `method` issues on `instance`.
pub fn pin_instance<F>(
    fx: &mut MockFixture,
    instance: &QuestionInstance,
    method: ScoringMethod,
    value: F,
) -> Result<(), ScoringError>
where
    F: Fn(&QuestionInstance, usize, Stage) -> f64,
{
    match method {
        ScoringMethod::Base(m) => {
            pin_base(fx, instance, m, &value)?;
        }
        ScoringMethod::Poe { step1 } => {
            let scores = pin_base(fx, instance, step1, &value)?;
            let outcome = eliminate(&ScoreVector::new(scores, ScoringMethod::Base(step1))?)?;
            pin_masked(fx, instance, &outcome.mask, |i| {
                value(instance, i, Stage::Predict)
            })?;
        }
    }
    Ok(())
}

/// Adds masked prediction-pass entries for the survivors of `mask`. Nothing
/// is added when a single option survives, since that pass is skipped.
pub fn pin_masked(
    fx: &mut MockFixture,
    instance: &QuestionInstance,
    mask: &Mask,
    value: impl Fn(usize) -> f64,
) -> Result<(), TemplateError> {
    if mask.popcount() < 2 {
        return Ok(());
    }
    for i in mask.survivors() {
        let p = templating::render_mcp(instance, i, Some(mask), &[])?;
        fx.insert(&p.parts, vec![value(i)]);
    }
    Ok(())
}

/// Fixture in which the gold option scores `hi` and every other option `lo`
/// in every pass of `method`.
pub fn gold_pinned(
    instances: &[QuestionInstance],
    method: ScoringMethod,
    hi: f64,
    lo: f64,
) -> Result<MockFixture, ScoringError> {
    let mut fx = MockFixture::default();
    for inst in instances {
        pin_instance(&mut fx, inst, method, |q, i, _| {
            if i == q.gold_index {
                hi
            } else {
                lo
            }
        })?;
    }
    Ok(fx)
}
