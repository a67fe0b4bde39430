//! Seeded evaluation loop.

use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{MockBackend, MockFixture, NetworkBackend, NetworkConfig, ScorerBackend};
use crate::config::{BackendKind, ConfigError, RunConfig};
use crate::datasets::{self, DatasetError};
use crate::metrics::{self, EvalReport, InstanceTrace, MetricsError, SeedReport};
use crate::scoring::{self, MethodContext, MethodOutcome, ScoringError};
use crate::types::{ImageCheck, QuestionInstance, Split};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error on instance {id:?}: {source}")]
    Backend {
        id: String,
        #[source]
        source: ScoringError,
    },
}

impl RunError {
    /// Process exit status: 2 config, 3 data, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) => 3,
            RunError::Backend { .. } => 4,
        }
    }

    pub fn from_scoring(id: &str, e: ScoringError) -> Self {
        match e {
            ScoringError::Template(_) | ScoringError::TooFewScores(_) => {
                RunError::Data(format!("instance {id:?}: {e}"))
            }
            ScoringError::DemoSplitOverlap { .. }
            | ScoringError::DemoIsQuery(_)
            | ScoringError::WrongMethod(_) => RunError::Config(format!("instance {id:?}: {e}")),
            ScoringError::Backend { .. } | ScoringError::NonFiniteScore(_) => RunError::Backend {
                id: id.to_string(),
                source: e,
            },
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

impl From<DatasetError> for RunError {
    fn from(e: DatasetError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<MetricsError> for RunError {
    fn from(e: MetricsError) -> Self {
        RunError::Data(e.to_string())
    }
}

/// Network request timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Instances to evaluate and the demonstration pool.
///
/// Evaluation uses the test split when present, else dev, else train.
/// Demonstrations come from `demo_split`, which must differ from the
/// evaluation split whenever demonstrations are requested.
pub fn partition(
    instances: &[QuestionInstance],
    demo_split: Split,
    n_shot: usize,
) -> Result<(Vec<QuestionInstance>, Vec<QuestionInstance>), RunError> {
    let eval_split = [Split::Test, Split::Dev, Split::Train]
        .into_iter()
        .find(|s| instances.iter().any(|q| q.split == *s))
        .ok_or_else(|| RunError::Data("data file has no instances".into()))?;
    if n_shot > 0 && eval_split == demo_split {
        return Err(RunError::Config(format!(
            "demonstrations requested from the {demo_split} split, which is also the evaluation split"
        )));
    }
    let eval = instances
        .iter()
        .filter(|q| q.split == eval_split)
        .cloned()
        .collect();
    let pool = instances
        .iter()
        .filter(|q| q.split == demo_split)
        .cloned()
        .collect();
    Ok((eval, pool))
}

/// Scores one instance and returns its trace.
pub fn evaluate_instance(
    instance: &QuestionInstance,
    pool: &[QuestionInstance],
    cfg: &RunConfig,
    seed: u64,
    backend: &dyn ScorerBackend,
) -> Result<(InstanceTrace, MethodOutcome), RunError> {
    let demos = datasets::sample_demos(
        pool,
        cfg.n_shot,
        datasets::demo_seed(seed, &instance.id),
        &instance.id,
    )?;
    let ctx = MethodContext::new(instance, &demos, backend, cfg.method)
        .map_err(|e| RunError::from_scoring(&instance.id, e))?;
    let outcome = scoring::predict(&ctx).map_err(|e| RunError::from_scoring(&instance.id, e))?;
    Ok((InstanceTrace::new(instance, cfg.method, &outcome), outcome))
}

/// Runs every seed against backends produced by `backend_for(seed)`.
pub fn run_with<F, B>(
    cfg: &RunConfig,
    instances: &[QuestionInstance],
    backend_for: F,
) -> Result<EvalReport, RunError>
where
    F: Fn(u64) -> B,
    B: ScorerBackend,
{
    cfg.validate()?;
    let (eval, pool) = partition(instances, cfg.demo_split, cfg.n_shot)?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let backend = backend_for(seed);
        let traces = eval
            .par_iter()
            .map(|q| evaluate_instance(q, &pool, cfg, seed, &backend).map(|(t, _)| t))
            .collect::<Result<Vec<_>, _>>()?;
        per_seed.push(SeedReport::from_traces(seed, traces, !cfg.no_traces)?);
    }
    let aggregate = metrics::aggregate_seeds(&per_seed)?;
    Ok(EvalReport {
        config_echo: cfg.clone(),
        per_seed,
        aggregate,
    })
}

pub fn load_fixture(path: Option<&Path>) -> Result<Option<MockFixture>, RunError> {
    path.map(|p| {
        MockFixture::load(p)
            .map_err(|e| RunError::Data(format!("cannot load mock fixture {}: {e}", p.display())))
    })
    .transpose()
}

pub fn network_backend(endpoint: &str, max_parallel: usize) -> NetworkBackend {
    let mut nc = NetworkConfig::new(endpoint);
    nc.max_parallel = max_parallel;
    nc.timeout = DEFAULT_TIMEOUT;
    NetworkBackend::new(nc)
}

/// Loads the data file, builds the configured backend, evaluates every
/// seed, and writes the report to `cfg.output_path`.
pub fn run(cfg: &RunConfig) -> Result<EvalReport, RunError> {
    cfg.validate()?;
    let instances = datasets::load_jsonl(&cfg.data_path, ImageCheck::Require)?;
    let report = match cfg.backend {
        BackendKind::Mock => {
            let fixture = load_fixture(cfg.mock_fixture.as_deref())?;
            run_with(cfg, &instances, |seed| {
                MockBackend::new(fixture.as_ref(), seed)
            })?
        }
        BackendKind::Network => {
            let endpoint = cfg
                .endpoint
                .as_deref()
                .ok_or(RunError::Config("network backend needs an endpoint".into()))?;
            let backend = network_backend(endpoint, cfg.max_parallel);
            run_with(cfg, &instances, |_| &backend)?
        }
    };
    std::fs::write(&cfg.output_path, report.to_json()).map_err(|e| {
        RunError::Data(format!(
            "cannot write report {}: {e}",
            cfg.output_path.display()
        ))
    })?;
    Ok(report)
}
