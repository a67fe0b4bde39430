//! Run configuration and its layered resolution
//! (command-line flags, then environment, then config file).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ScoringMethod, Split};

pub use crate::backend::ENDPOINT_ENV;

pub const DEFAULT_MAX_PARALLEL: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("invalid setting `{field}`: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
    #[error("cannot read config file {path}: {message}")]
    File { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Network,
}

impl std::str::FromStr for BackendKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mock" => Ok(BackendKind::Mock),
            "network" => Ok(BackendKind::Network),
            _ => Err(ConfigError::Invalid {
                field: "backend",
                message: format!("expected mock or network, got {s:?}"),
            }),
        }
    }
}

/// A fully resolved, validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub method: ScoringMethod,
    pub n_shot: usize,
    pub seeds: Vec<u64>,
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub max_parallel: usize,
    pub demo_split: Split,
    pub output_path: PathBuf,
    /// Score table for the mock backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_fixture: Option<PathBuf>,
    #[serde(default)]
    pub no_traces: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (self.backend, &self.endpoint) {
            (BackendKind::Network, None) => return Err(ConfigError::Missing("endpoint")),
            (BackendKind::Mock, Some(_)) => {
                return Err(ConfigError::Invalid {
                    field: "endpoint",
                    message: "only valid with the network backend".into(),
                })
            }
            _ => {}
        }
        if self.backend == BackendKind::Network && self.mock_fixture.is_some() {
            return Err(ConfigError::Invalid {
                field: "mock_fixture",
                message: "only valid with the mock backend".into(),
            });
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Missing("seeds"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(ConfigError::Invalid {
                field: "seeds",
                message: format!("seed {dup} repeated"),
            });
        }
        if self.max_parallel == 0 {
            return Err(ConfigError::Invalid {
                field: "max_parallel",
                message: "must be positive".into(),
            });
        }
        if self.demo_split == Split::Test {
            return Err(ConfigError::Invalid {
                field: "demo_split",
                message: "demonstrations come from train or dev".into(),
            });
        }
        Ok(())
    }
}

/// One layer of settings. Field names mirror [`RunConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub data_path: Option<PathBuf>,
    pub method: Option<String>,
    pub step1_method: Option<String>,
    pub n_shot: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub max_parallel: Option<usize>,
    pub demo_split: Option<String>,
    pub output_path: Option<PathBuf>,
    pub mock_fixture: Option<PathBuf>,
    pub no_traces: Option<bool>,
}

impl ConfigLayer {
    /// Reads a flat TOML document of `key = value` pairs.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// The environment layer: only the endpoint is read from the environment.
    pub fn from_env() -> Self {
        Self {
            endpoint: std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()),
            ..Self::default()
        }
    }

    /// Fills every unset field of `self` from `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            data_path: self.data_path.or(lower.data_path),
            method: self.method.or(lower.method),
            step1_method: self.step1_method.or(lower.step1_method),
            n_shot: self.n_shot.or(lower.n_shot),
            seeds: self.seeds.or(lower.seeds),
            backend: self.backend.or(lower.backend),
            endpoint: self.endpoint.or(lower.endpoint),
            max_parallel: self.max_parallel.or(lower.max_parallel),
            demo_split: self.demo_split.or(lower.demo_split),
            output_path: self.output_path.or(lower.output_path),
            mock_fixture: self.mock_fixture.or(lower.mock_fixture),
            no_traces: self.no_traces.or(lower.no_traces),
        }
    }

    /// Resolves `flags > env > file` into a validated config. An endpoint
    /// that only comes from the environment is ignored for mock runs.
    pub fn resolve(
        flags: ConfigLayer,
        env: ConfigLayer,
        file: ConfigLayer,
    ) -> Result<RunConfig, ConfigError> {
        let explicit_endpoint = flags.endpoint.is_some() || file.endpoint.is_some();
        let mut merged = flags.over(env).over(file);
        let backend: BackendKind = merged.backend.as_deref().unwrap_or("mock").parse()?;
        if backend == BackendKind::Mock && !explicit_endpoint {
            merged.endpoint = None;
        }
        let method = ScoringMethod::parse(
            merged
                .method
                .as_deref()
                .ok_or(ConfigError::Missing("method"))?,
            merged.step1_method.as_deref(),
        )
        .map_err(|e| ConfigError::Invalid {
            field: "method",
            message: e.to_string(),
        })?;
        let demo_split = merged
            .demo_split
            .as_deref()
            .unwrap_or("train")
            .parse()
            .map_err(|e: crate::types::ValidationError| ConfigError::Invalid {
                field: "demo_split",
                message: e.to_string(),
            })?;
        let cfg = RunConfig {
            data_path: merged.data_path.ok_or(ConfigError::Missing("data_path"))?,
            method,
            n_shot: merged.n_shot.unwrap_or(0),
            seeds: merged.seeds.unwrap_or_else(|| vec![0]),
            backend,
            endpoint: merged.endpoint,
            max_parallel: merged.max_parallel.unwrap_or(DEFAULT_MAX_PARALLEL),
            demo_split,
            output_path: merged
                .output_path
                .ok_or(ConfigError::Missing("output_path"))?,
            mock_fixture: merged.mock_fixture,
            no_traces: merged.no_traces.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
