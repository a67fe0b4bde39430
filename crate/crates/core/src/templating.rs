//! Prompt rendering for every scoring method.
//!
//! Each renderer produces [`PromptParts`]: the prompt as ordered text and
//! image segments, plus the continuation the backend must score. All
//! literal strings live in the constants below; nothing else in the crate
//! builds prompt text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{BaseMethod, Mask, PromptParts, QuestionInstance, ScoringMethod, Segment};

pub const LM_CUE: &str = " the answer is: ";
pub const CHANNEL_CUE: &str = " the answer is:";
pub const QUESTION_PREFIX: &str = "Question: ";
pub const IMAGE_LABEL: &str = ", Image: ";
pub const ANSWER_PREFIX: &str = "Answer: ";
pub const STEP2_INSTRUCTION: &str = "Select the most suitable option to answer the question.";
pub const STEP2_IGNORE: &str = "Ignore [MASK] options.";
pub const MASK_TOKEN: &str = "[MASK]";
/// Question text used for the content-free calibration pass.
pub const CONTENT_FREE_QUESTION: &str = "N/A";
pub const DEMO_SEPARATOR: &str = "\n\n";

const MAX_OPTIONS: usize = 26;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("option index {index} out of range for {n} options")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("option {index} is masked and cannot be scored")]
    MaskedOptionRequested { index: usize },
    #[error("mask has {mask_len} bits but the instance has {n} options")]
    MaskLengthMismatch { mask_len: usize, n: usize },
    #[error("{n} options exceed the {MAX_OPTIONS} available letter labels")]
    TooManyOptions { n: usize },
}

/// A prompt bound to the option it scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub parts: PromptParts,
    pub method: ScoringMethod,
    pub option_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_letter: Option<String>,
}

/// Letter label for option `i`: `A`, `B`, ...
pub fn label(i: usize) -> Result<char, TemplateError> {
    if i >= MAX_OPTIONS {
        return Err(TemplateError::TooManyOptions { n: i + 1 });
    }
    Ok((b'A' + i as u8) as char)
}

fn check_index(instance: &QuestionInstance, index: usize) -> Result<(), TemplateError> {
    let n = instance.n_options();
    if n > MAX_OPTIONS {
        return Err(TemplateError::TooManyOptions { n });
    }
    if index >= n {
        return Err(TemplateError::IndexOutOfRange { index, n });
    }
    Ok(())
}

fn image(instance: &QuestionInstance) -> Segment {
    Segment::Image {
        image: instance.image.clone(),
    }
}

fn with_demos(
    demos: &[QuestionInstance],
    format: DemoFormat,
) -> Result<PromptParts, TemplateError> {
    let mut parts = PromptParts::default();
    for seg in render_demo_segments(demos, format)? {
        parts.push(seg);
    }
    Ok(parts)
}

fn push_lm_body(parts: &mut PromptParts, question: &str, instance: &QuestionInstance) {
    parts.push_text(&format!("{question} "));
    parts.push(image(instance));
    parts.push_text(LM_CUE);
}

fn push_channel_body(parts: &mut PromptParts, option: &str, instance: &QuestionInstance) {
    parts.push_text(&format!("{option}, "));
    parts.push(image(instance));
}

fn channel_continuation(instance: &QuestionInstance) -> String {
    format!("{}{CHANNEL_CUE}", instance.question)
}

/// Appends the `Question: .., Image: <img>` block with one labelled line per
/// option, ending with the trailing `Answer: ` cue.
fn push_mcp_body(
    parts: &mut PromptParts,
    instance: &QuestionInstance,
    mask: Option<&Mask>,
) -> Result<(), TemplateError> {
    parts.push_text(&format!(
        "{QUESTION_PREFIX}{}{IMAGE_LABEL}",
        instance.question
    ));
    parts.push(image(instance));
    let mut block = String::from("\n");
    for (i, opt) in instance.options.iter().enumerate() {
        let shown = match mask.and_then(|m| m.get(i)) {
            Some(false) => MASK_TOKEN,
            _ => opt.as_str(),
        };
        block.push_str(&format!("{}. {shown}\n", label(i)?));
    }
    block.push_str(ANSWER_PREFIX);
    parts.push_text(&block);
    Ok(())
}

/// LM / AVG prompt: `{x} <img> the answer is: ` scored against the option text.
pub fn render_lm(
    instance: &QuestionInstance,
    option_index: usize,
    demos: &[QuestionInstance],
) -> Result<RenderedPrompt, TemplateError> {
    render_lm_like(
        instance,
        &instance.question,
        option_index,
        demos,
        ScoringMethod::Base(BaseMethod::Lm),
    )
}

/// Calibration prompt. With `content_free` the query question is replaced by
/// [`CONTENT_FREE_QUESTION`]; image, demonstrations and continuation stay.
pub fn render_calibration(
    instance: &QuestionInstance,
    option_index: usize,
    demos: &[QuestionInstance],
    content_free: bool,
) -> Result<RenderedPrompt, TemplateError> {
    let question = if content_free {
        CONTENT_FREE_QUESTION
    } else {
        instance.question.as_str()
    };
    render_lm_like(
        instance,
        question,
        option_index,
        demos,
        ScoringMethod::Base(BaseMethod::Calibration),
    )
}

fn render_lm_like(
    instance: &QuestionInstance,
    question: &str,
    option_index: usize,
    demos: &[QuestionInstance],
    method: ScoringMethod,
) -> Result<RenderedPrompt, TemplateError> {
    check_index(instance, option_index)?;
    let mut parts = with_demos(demos, DemoFormat::Lm)?;
    push_lm_body(&mut parts, question, instance);
    parts.continuation = instance.options[option_index].clone();
    Ok(RenderedPrompt {
        parts,
        method,
        option_index,
        label_letter: None,
    })
}

/// Channel prompt: `{y_i}, <img>` scored against `{x} the answer is:`.
pub fn render_channel(
    instance: &QuestionInstance,
    option_index: usize,
    demos: &[QuestionInstance],
) -> Result<RenderedPrompt, TemplateError> {
    check_index(instance, option_index)?;
    let mut parts = with_demos(demos, DemoFormat::Channel)?;
    push_channel_body(&mut parts, &instance.options[option_index], instance);
    parts.continuation = channel_continuation(instance);
    Ok(RenderedPrompt {
        parts,
        method: ScoringMethod::Base(BaseMethod::Channel),
        option_index,
        label_letter: None,
    })
}

/// Multiple-choice prompt scored against the option's letter.
///
/// Without a mask this is the plain listing used by MCP and the elimination
/// step. With a mask it becomes the prediction-step prompt: the two
/// instruction lines are prepended to the query block and every eliminated
/// option's text is replaced by `[MASK]`. Demonstrations always use the
/// unmasked listing and precede the instruction lines.
pub fn render_mcp(
    instance: &QuestionInstance,
    option_index: usize,
    mask: Option<&Mask>,
    demos: &[QuestionInstance],
) -> Result<RenderedPrompt, TemplateError> {
    check_index(instance, option_index)?;
    let n = instance.n_options();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(TemplateError::MaskLengthMismatch {
                mask_len: m.len(),
                n,
            });
        }
        if m.get(option_index) == Some(false) {
            return Err(TemplateError::MaskedOptionRequested {
                index: option_index,
            });
        }
    }
    let mut parts = with_demos(demos, DemoFormat::Mcp)?;
    if mask.is_some() {
        parts.push_text(&format!("{STEP2_INSTRUCTION}\n{STEP2_IGNORE}\n"));
    }
    push_mcp_body(&mut parts, instance, mask)?;
    let letter = label(option_index)?.to_string();
    parts.continuation = letter.clone();
    Ok(RenderedPrompt {
        parts,
        method: match mask {
            None => ScoringMethod::Base(BaseMethod::Mcp),
            Some(_) => ScoringMethod::poe(),
        },
        option_index,
        label_letter: Some(letter),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DemoFormat {
    Lm,
    Channel,
    Mcp,
}

impl From<ScoringMethod> for DemoFormat {
    fn from(m: ScoringMethod) -> Self {
        match m {
            ScoringMethod::Base(BaseMethod::Lm)
            | ScoringMethod::Base(BaseMethod::Avg)
            | ScoringMethod::Base(BaseMethod::Calibration) => DemoFormat::Lm,
            ScoringMethod::Base(BaseMethod::Channel) => DemoFormat::Channel,
            ScoringMethod::Base(BaseMethod::Mcp) | ScoringMethod::Poe { .. } => DemoFormat::Mcp,
        }
    }
}

/// Few-shot prefix: each demonstration in the query's format (including its
/// own image), answered with its gold continuation and followed by a blank
/// line.
pub fn render_demos(
    demos: &[QuestionInstance],
    method: ScoringMethod,
) -> Result<Vec<Segment>, TemplateError> {
    render_demo_segments(demos, method.into())
}

fn render_demo_segments(
    demos: &[QuestionInstance],
    format: DemoFormat,
) -> Result<Vec<Segment>, TemplateError> {
    let mut parts = PromptParts::default();
    for demo in demos {
        check_index(demo, demo.gold_index)?;
        match format {
            DemoFormat::Lm => {
                push_lm_body(&mut parts, &demo.question, demo);
                parts.push_text(demo.gold_text());
            }
            DemoFormat::Channel => {
                push_channel_body(&mut parts, demo.gold_text(), demo);
                parts.push_text(&channel_continuation(demo));
            }
            DemoFormat::Mcp => {
                push_mcp_body(&mut parts, demo, None)?;
                parts.push_text(&label(demo.gold_index)?.to_string());
            }
        }
        parts.push_text(DEMO_SEPARATOR);
    }
    Ok(parts.segments)
}
