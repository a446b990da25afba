//! The run configuration file.

use std::path::{Path, PathBuf};

use planrank::dataset::WorkloadConfig;
use planrank::decision::{DEFAULT_K, DEFAULT_TIE_EPSILON};
use planrank::ood::DetectorConfig;
use planrank::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionConfig {
    pub k: usize,
    /// Relative tie tolerance.
    pub tie_epsilon: f64,
    /// Decide even when the detector calibration is degraded.
    pub force: bool,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            k: DEFAULT_K,
            tie_epsilon: DEFAULT_TIE_EPSILON,
            force: false,
        }
    }
}

/// Artifact locations, relative to the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub split: PathBuf,
    pub checkpoint: PathBuf,
    pub detector: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "workload.jsonl".into(),
            split: "split.json".into(),
            checkpoint: "model.ckpt".into(),
            detector: "detector.bin".into(),
            report: "report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    /// The single source of randomness. It replaces the `seed` of every
    /// section when the config is loaded.
    pub seed: u64,
    pub split_ratio: f64,
    pub workload: WorkloadConfig,
    pub train: TrainConfig,
    pub ood: DetectorConfig,
    pub decision: DecisionConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: RUN_CONFIG_FORMAT_VERSION,
            seed: 42,
            split_ratio: 0.8,
            workload: WorkloadConfig::default(),
            train: TrainConfig::default(),
            ood: DetectorConfig::default(),
            decision: DecisionConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("config format_version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Invalid(#[from] planrank::Error),
}

impl RunConfig {
    /// Loads `path`, applies the seed override, propagates the seed and
    /// resolves artifact paths against the config directory.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if cfg.format_version != RUN_CONFIG_FORMAT_VERSION {
            return Err(ConfigError::Version {
                found: cfg.format_version,
                expected: RUN_CONFIG_FORMAT_VERSION,
            });
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.workload.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.ood.seed = cfg.seed;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.dataset,
            &mut cfg.paths.split,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.detector,
            &mut cfg.paths.report,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> planrank::Result<()> {
        self.workload.validate()?;
        self.train.validate()?;
        self.ood.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(planrank::Error::InvalidConfig(format!(
                "split_ratio {} must lie in (0, 1)",
                self.split_ratio
            )));
        }
        if self.decision.k == 0 {
            return Err(planrank::Error::InvalidConfig("decision.k must be positive".into()));
        }
        if !(self.decision.tie_epsilon >= 0.0) {
            return Err(planrank::Error::InvalidConfig("decision.tie_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}
