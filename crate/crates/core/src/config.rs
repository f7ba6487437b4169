//! Run configuration: a versioned JSON document whose defaults reproduce the
//! reference experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{FilterSettings, SelectionConfig};
use crate::safety::MotorReduction;
use crate::scenario::{ScenarioConfig, WorldParams};
use crate::uncertainty::{DistributionSpec, ParamDomain, ProbeResult, DEFAULT_NOMINAL_TOLERANCE};

pub const CONFIG_VERSION: u32 = 1;
/// Overrides `output_dir` when set.
pub const OUT_ENV: &str = "PHYSFILTER_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{}: `{field}` {message}", line.map(|l| format!("line {l}")).unwrap_or_else(|| "config".into()))]
    Invalid {
        field: String,
        line: Option<usize>,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub scenario: ScenarioConfig,
    pub distribution: DistributionSpec,
    pub grid_n: usize,
    pub epsilon: f64,
    pub horizon: usize,
    pub dt: f64,
    pub selection: SelectionConfig,
    pub motor_reduction: MotorReduction,
    pub sparse_steps: usize,
    pub probe: ProbeResult,
    pub probe_budget: usize,
    pub probe_thresholds: WorldParams,
    pub nominal_tolerance: WorldParams,
    /// Worker threads for sparse evaluation; 0 uses every core.
    pub workers: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            scenario: ScenarioConfig::default(),
            distribution: DistributionSpec {
                mean: WorldParams::new(0.25, 0.5),
                sigma: WorldParams::new(0.8, 0.5),
                domain: ParamDomain::default(),
            },
            grid_n: 48,
            epsilon: 0.75,
            horizon: 1200,
            dt: 1.0 / 240.0,
            selection: SelectionConfig::default(),
            motor_reduction: MotorReduction::Max,
            sparse_steps: 1,
            probe: ProbeResult {
                mean: WorldParams::new(0.2, 0.8),
                sigma: WorldParams::new(0.1, 0.2),
            },
            probe_budget: 1,
            probe_thresholds: WorldParams::new(0.2, 0.25),
            nominal_tolerance: DEFAULT_NOMINAL_TOLERANCE,
            workers: 0,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Line of the first `"key"` occurrence of the last path segment.
fn locate(source: Option<&str>, field: &str) -> Option<usize> {
    let key = field.rsplit('.').next()?;
    let key = key.split('[').next()?;
    let needle = format!("\"{key}\"");
    source?
        .lines()
        .position(|l| l.contains(&needle))
        .map(|i| i + 1)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate_with_source(Some(text))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with_source(None)
    }

    fn validate_with_source(&self, source: Option<&str>) -> Result<(), ConfigError> {
        let fail = |field: &str, message: String| ConfigError::Invalid {
            field: field.to_string(),
            line: locate(source, field),
            message,
        };
        if self.version != CONFIG_VERSION {
            return Err(fail("version", format!("must be {CONFIG_VERSION}")));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(fail("epsilon", format!("must lie in (0, 1], got {}", self.epsilon)));
        }
        if self.grid_n < 2 {
            return Err(fail("grid_n", "must be at least 2".into()));
        }
        if self.horizon == 0 {
            return Err(fail("horizon", "must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(fail("dt", "must be positive".into()));
        }
        if self.selection.per_cause == 0 {
            return Err(fail("selection.per_cause", "must be at least 1".into()));
        }
        if self.sparse_steps == 0 {
            return Err(fail("sparse_steps", "must be at least 1".into()));
        }
        self.distribution
            .validate()
            .map_err(|e| fail("distribution", e.to_string()))?;
        DistributionSpec::new(self.probe.mean, self.probe.sigma, self.distribution.domain)
            .map_err(|e| fail("probe", e.to_string()))?;
        for (name, v) in [
            ("probe_thresholds", self.probe_thresholds),
            ("nominal_tolerance", self.nominal_tolerance),
        ] {
            if !(v.theta_m >= 0.0 && v.theta_mu >= 0.0) {
                return Err(fail(name, "entries must be non-negative".into()));
            }
        }
        self.scenario
            .validate()
            .map_err(|e| fail("scenario", e.to_string()))?;
        Ok(())
    }

    /// Applies the output-directory environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        self
    }

    pub fn effective_workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            self.workers
        }
    }

    pub fn filter_settings(&self) -> FilterSettings {
        FilterSettings {
            scenario: self.scenario.clone(),
            horizon: self.horizon,
            dt: self.dt,
            grid_n: self.grid_n,
            epsilon: self.epsilon,
            selection: self.selection.clone(),
            reduction: self.motor_reduction,
            sparse_steps: self.sparse_steps,
            probe: self.probe,
            probe_budget: self.probe_budget,
            probe_thresholds: self.probe_thresholds,
            nominal_tolerance: self.nominal_tolerance,
            workers: self.effective_workers(),
            seed: self.seed,
        }
    }
}
