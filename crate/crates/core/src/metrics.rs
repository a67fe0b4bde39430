//! Accuracy, mask accuracy, and seed aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::scoring::MethodOutcome;
use crate::types::{Mask, QuestionInstance, ScoringMethod};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no traces to score")]
    EmptyTraceSet,
    #[error("trace {0:?} has no step-1 mask data")]
    MissingMaskData(String),
    #[error("seed {seed} covers {got} instances, expected {expected}")]
    SeedCountMismatch {
        seed: u64,
        got: usize,
        expected: usize,
    },
    #[error("no seed reports to aggregate")]
    NoSeeds,
}

/// What happened to one instance under one method and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrace {
    pub id: String,
    pub method: ScoringMethod,
    /// Single-pass scores for baselines, elimination-pass scores for PoE.
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step2_scores: Option<Vec<(usize, f64)>>,
    pub predicted_index: usize,
    pub gold_index: usize,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_survived: Option<bool>,
}

impl InstanceTrace {
    pub fn new(
        instance: &QuestionInstance,
        method: ScoringMethod,
        outcome: &MethodOutcome,
    ) -> Self {
        let predicted_index = outcome.predicted_index();
        let gold = instance.gold_index;
        let (scores, mask, step2_scores, gold_survived) = match outcome {
            MethodOutcome::Baseline { scores, .. } => (scores.scores().to_vec(), None, None, None),
            MethodOutcome::Poe(p) => (
                p.step1.score_vector.scores().to_vec(),
                Some(p.step1.mask.clone()),
                Some(p.step2_scores.clone()),
                Some(p.step1.mask.get(gold) == Some(true)),
            ),
        };
        Self {
            id: instance.id.clone(),
            method,
            scores,
            mask,
            step2_scores,
            predicted_index,
            gold_index: gold,
            correct: predicted_index == gold,
            gold_survived,
        }
    }
}

/// Fraction of traces whose prediction is the gold option.
pub fn accuracy(traces: &[InstanceTrace]) -> Result<f64, MetricsError> {
    if traces.is_empty() {
        return Err(MetricsError::EmptyTraceSet);
    }
    let correct = traces.iter().filter(|t| t.correct).count();
    Ok(correct as f64 / traces.len() as f64)
}

/// Fraction of traces whose gold option survived elimination.
pub fn mask_accuracy(traces: &[InstanceTrace]) -> Result<f64, MetricsError> {
    if traces.is_empty() {
        return Err(MetricsError::EmptyTraceSet);
    }
    let mut survived = 0usize;
    for t in traces {
        match t.gold_survived {
            Some(true) => survived += 1,
            Some(false) => {}
            None => return Err(MetricsError::MissingMaskData(t.id.clone())),
        }
    }
    Ok(survived as f64 / traces.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_accuracy: Option<f64>,
    pub instance_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_traces: Option<Vec<InstanceTrace>>,
}

impl SeedReport {
    /// Mask accuracy is reported only when every trace carries mask data.
    pub fn from_traces(
        seed: u64,
        traces: Vec<InstanceTrace>,
        keep_traces: bool,
    ) -> Result<Self, MetricsError> {
        let acc = accuracy(&traces)?;
        let mask_acc = if traces.iter().all(|t| t.gold_survived.is_some()) {
            Some(mask_accuracy(&traces)?)
        } else {
            None
        };
        Ok(Self {
            seed,
            accuracy: acc,
            mask_accuracy: mask_acc,
            instance_count: traces.len(),
            instance_traces: keep_traces.then_some(traces),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mask_accuracy: Option<f64>,
    pub instance_count: usize,
}

/// Arithmetic means across seeds; every seed must cover the same instances.
pub fn aggregate_seeds(per_seed: &[SeedReport]) -> Result<Aggregate, MetricsError> {
    let first = per_seed.first().ok_or(MetricsError::NoSeeds)?;
    for r in per_seed {
        if r.instance_count != first.instance_count {
            return Err(MetricsError::SeedCountMismatch {
                seed: r.seed,
                got: r.instance_count,
                expected: first.instance_count,
            });
        }
    }
    let n = per_seed.len() as f64;
    let mean_accuracy = per_seed.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let mean_mask_accuracy = per_seed
        .iter()
        .map(|r| r.mask_accuracy)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Ok(Aggregate {
        mean_accuracy,
        mean_mask_accuracy,
        instance_count: first.instance_count,
    })
}

/// Full result of one run, written as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_echo: RunConfig,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Plain-text summary table: one row per seed plus the mean.
pub fn render_table(report: &EvalReport) -> String {
    let cfg = &report.config_echo;
    let has_mask = report.aggregate.mean_mask_accuracy.is_some();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "method: {}  n_shot: {}  instances: {}",
        cfg.method, cfg.n_shot, report.aggregate.instance_count
    );
    let header = if has_mask {
        format!(
            "{:<10} | {:>8} | {:>13}",
            "seed", "accuracy", "mask accuracy"
        )
    } else {
        format!("{:<10} | {:>8}", "seed", "accuracy")
    };
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    let row = |label: String, acc: f64, mask: Option<f64>| match (has_mask, mask) {
        (true, Some(m)) => format!("{label:<10} | {:>8} | {:>13}", pct(acc), pct(m)),
        _ => format!("{label:<10} | {:>8}", pct(acc)),
    };
    for r in &report.per_seed {
        let _ = writeln!(
            out,
            "{}",
            row(r.seed.to_string(), r.accuracy, r.mask_accuracy)
        );
    }
    let _ = writeln!(
        out,
        "{}",
        row(
            "mean".into(),
            report.aggregate.mean_accuracy,
            report.aggregate.mean_mask_accuracy
        )
    );
    out
}
