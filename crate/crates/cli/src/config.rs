//! Experiment configuration: a single JSON document, strictly parsed and
//! validated as a whole before anything runs.

use std::fmt;
use std::path::Path;

use adp2sgd_core::engine::{
    Activation, LrRule, NoiseSpec, RunConfig, Scenario, ScenarioKind, SnapshotMode,
};
use adp2sgd_core::privacy::{self, BudgetRequest, MuSearch, PrivacyParams};
use adp2sgd_core::tasks::TaskSpec;
use adp2sgd_core::topology::{Bipartition, CommGraph};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("{}", render_errors(.0))]
    Invalid(Vec<String>),
}

fn render_errors(errors: &[String]) -> String {
    let mut s = format!("{} validation error(s):", errors.len());
    for e in errors {
        s.push_str("\n  - ");
        s.push_str(e);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Adpsgd,
    Sync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    Ring,
    FullBipartite,
    Complete,
    Custom {
        edges: Vec<(usize, usize)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        senders: Option<Vec<usize>>,
    },
}

impl GraphSpec {
    pub fn build(&self, workers: usize) -> adp2sgd_core::Result<CommGraph> {
        match self {
            GraphSpec::Ring => CommGraph::ring(workers),
            GraphSpec::FullBipartite => CommGraph::full_bipartite(workers),
            GraphSpec::Complete => CommGraph::complete(workers),
            GraphSpec::Custom { edges, senders } => {
                let partition = senders.as_ref().map(|s| Bipartition {
                    senders: s.clone(),
                    receivers: (0..workers).filter(|w| !s.contains(w)).collect(),
                });
                CommGraph::new(workers, edges, partition)
            }
        }
    }
}

/// `mu` as a number in (0, 1) or the string `"auto"` for a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuSetting {
    Fixed(f64),
    Named(String),
}

impl MuSetting {
    pub fn auto() -> Self {
        MuSetting::Named("auto".into())
    }

    pub fn is_auto(&self) -> bool {
        matches!(self, MuSetting::Named(s) if s == "auto")
    }

    /// Parses the `--mu` flag.
    pub fn parse_flag(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Self::auto());
        }
        s.parse::<f64>()
            .map(MuSetting::Fixed)
            .map_err(|_| format!("--mu expects `auto` or a number, got `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratedSpec {
    pub epsilon: f64,
    pub delta: f64,
    pub mu: MuSetting,
}

/// Exactly one of the two keys must be present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    /// Noise standard deviation, with no accounting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated: Option<CalibratedSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    None,
    RandomSlow,
    FixedStraggler,
    LargeBatch,
}

fn default_base() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioName,
    /// Slowdown factor for `random_slow` and `fixed_straggler`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
    /// The straggler for `fixed_straggler`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_mult: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_mult: Option<f64>,
    #[serde(default = "default_base")]
    pub base_compute_time: f64,
    #[serde(default)]
    pub comm_time: f64,
    /// Defaults to a tenth of `base_compute_time`.
    #[serde(default)]
    pub allreduce_time: Option<f64>,
    #[serde(default)]
    pub jitter: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioName::None,
            factor: None,
            worker: None,
            batch_mult: None,
            lr_mult: None,
            base_compute_time: 1.0,
            comm_time: 0.0,
            allreduce_time: Some(0.1),
            jitter: 0.0,
        }
    }
}

impl ScenarioSpec {
    fn validate(&self, errors: &mut Vec<String>) -> Option<Scenario> {
        let start = errors.len();
        let mut need = |key: &str, v: Option<f64>| -> f64 {
            v.unwrap_or_else(|| {
                errors.push(format!("scenario.{key} is required for kind {:?}", self.kind));
                f64::NAN
            })
        };
        let kind = match self.kind {
            ScenarioName::None => ScenarioKind::None,
            ScenarioName::RandomSlow => ScenarioKind::RandomSlow { factor: need("factor", self.factor) },
            ScenarioName::FixedStraggler => {
                let factor = need("factor", self.factor);
                let worker = self.worker.unwrap_or_else(|| {
                    errors.push("scenario.worker is required for kind FixedStraggler".into());
                    0
                });
                ScenarioKind::FixedStraggler { worker, factor }
            }
            ScenarioName::LargeBatch => ScenarioKind::LargeBatch {
                batch_mult: need("batch_mult", self.batch_mult),
                lr_mult: need("lr_mult", self.lr_mult),
            },
        };
        let allowed: &[&str] = match self.kind {
            ScenarioName::None => &[],
            ScenarioName::RandomSlow => &["factor"],
            ScenarioName::FixedStraggler => &["factor", "worker"],
            ScenarioName::LargeBatch => &["batch_mult", "lr_mult"],
        };
        for (key, present) in [
            ("factor", self.factor.is_some()),
            ("worker", self.worker.is_some()),
            ("batch_mult", self.batch_mult.is_some()),
            ("lr_mult", self.lr_mult.is_some()),
        ] {
            if present && !allowed.contains(&key) {
                errors.push(format!("scenario.{key} does not apply to kind {:?}", self.kind));
            }
        }
        let scenario = Scenario {
            kind,
            base_compute_time: self.base_compute_time,
            comm_time: self.comm_time,
            allreduce_time: self.allreduce_time.unwrap_or(0.1 * self.base_compute_time),
            jitter: self.jitter,
        };
        (errors.len() == start).then_some(scenario)
    }
}

fn default_trace() -> String {
    "trace.csv".into()
}
fn default_report() -> String {
    "report.json".into()
}

/// File names, resolved against the `--output` directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_trace")]
    pub trace: String,
    #[serde(default = "default_report")]
    pub report: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { trace: default_trace(), report: default_report() }
    }
}

fn default_stride() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: TaskSpec,
    pub graph: GraphSpec,
    pub mode: RunMode,
    pub privacy: PrivacySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_rule: Option<LrRule>,
    pub batch_size: usize,
    /// Model updates; asynchronous mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Synchronous rounds; sync mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub snapshot: SnapshotMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness_guard: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub probe_stride: usize,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Everything a run needs, derived from a valid config.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub scenario: Scenario,
    /// Batch size after scenario scaling.
    pub batch: usize,
    /// Iterations (asynchronous) or rounds (synchronous).
    pub length: usize,
    /// Total number of model updates.
    pub total_updates: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.scenario.allreduce_time.is_none() {
            cfg.scenario.allreduce_time = Some(0.1 * cfg.scenario.base_compute_time);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<ResolvedRun, ConfigError> {
        let mut errors = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errors.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let task_errors = self.task.validate();
        let task_ok = task_errors.is_empty();
        errors.extend(task_errors);
        if task_ok {
            if let Err(e) = self.graph.build(self.task.workers) {
                errors.push(format!("graph: {e}"));
            }
        }

        match (&self.privacy.raw_sigma, &self.privacy.calibrated) {
            (Some(_), Some(_)) => {
                errors.push("privacy: raw_sigma and calibrated are mutually exclusive; give exactly one".into())
            }
            (None, None) => errors.push("privacy: one of raw_sigma or calibrated is required".into()),
            (Some(s), None) if !(*s >= 0.0 && s.is_finite()) => {
                errors.push(format!("privacy.raw_sigma must be >= 0 (got {s})"))
            }
            (None, Some(c)) => {
                if !(c.epsilon > 0.0 && c.epsilon.is_finite()) {
                    errors.push(format!("privacy.calibrated.epsilon must be > 0 (got {})", c.epsilon));
                }
                if !(c.delta > 0.0 && c.delta < 1.0) {
                    errors.push(format!("privacy.calibrated.delta must lie in (0, 1) (got {})", c.delta));
                }
                match &c.mu {
                    MuSetting::Fixed(m) if !(*m > 0.0 && *m < 1.0) => {
                        errors.push(format!("privacy.calibrated.mu must lie in (0, 1) (got {m})"))
                    }
                    MuSetting::Named(s) if s != "auto" => {
                        errors.push(format!("privacy.calibrated.mu must be a number or \"auto\" (got \"{s}\")"))
                    }
                    _ => {}
                }
                if !self.task.clipping {
                    errors.push("privacy.calibrated requires task.clipping = true".into());
                }
            }
            _ => {}
        }

        match (self.learning_rate, self.lr_rule) {
            (Some(_), Some(LrRule::InverseSqrt)) => {
                errors.push("learning_rate and lr_rule = prop1 are mutually exclusive".into())
            }
            (None, None) | (None, Some(LrRule::Fixed)) => {
                errors.push("a learning rate source is required: learning_rate or lr_rule = prop1".into())
            }
            (Some(eta), _) if !(eta > 0.0 && eta.is_finite()) => {
                errors.push(format!("learning_rate must be > 0 (got {eta})"))
            }
            _ => {}
        }

        let length = match (self.mode, self.iterations, self.epochs) {
            (RunMode::Adpsgd, Some(t), None) => Some(t),
            (RunMode::Sync, None, Some(e)) => Some(e),
            (RunMode::Adpsgd, _, Some(_)) => {
                errors.push("epochs applies to mode sync; use iterations for adpsgd".into());
                None
            }
            (RunMode::Sync, Some(_), _) => {
                errors.push("iterations applies to mode adpsgd; use epochs for sync".into());
                None
            }
            (RunMode::Adpsgd, None, None) => {
                errors.push("iterations is required for mode adpsgd".into());
                None
            }
            (RunMode::Sync, None, None) => {
                errors.push("epochs is required for mode sync".into());
                None
            }
        };
        if length == Some(0) {
            errors.push("iterations/epochs must be >= 1".into());
        }
        if self.probe_stride == 0 {
            errors.push("probe_stride must be >= 1".into());
        }

        let scenario = self.scenario.validate(&mut errors);
        if let Some(s) = &scenario {
            if let Err(e) = s.validate(self.task.workers) {
                errors.push(format!("scenario: {e}"));
            }
        }
        let batch = scenario
            .map(|s| s.scale_hyperparameters(self.batch_size, 1.0).0)
            .unwrap_or(self.batch_size);
        let n1 = self.task.shard_size_list().into_iter().min().unwrap_or(0);
        if batch == 0 || (task_ok && batch > n1) {
            errors.push(format!("batch_size (effective {batch}) must lie in 1..={n1}"));
        }
        if self.output.trace.is_empty() || self.output.report.is_empty() {
            errors.push("output file names must be nonempty".into());
        }

        if !errors.is_empty() {
            return Err(ConfigError::Invalid(errors));
        }
        let length = length.expect("validated");
        let per = match self.mode {
            RunMode::Adpsgd => 1,
            RunMode::Sync => self.task.workers,
        };
        Ok(ResolvedRun { scenario: scenario.expect("validated"), batch, length, total_updates: length * per })
    }

    /// Calibration inputs for a calibrated config.
    pub fn budget_request(&self) -> Option<BudgetRequest> {
        let c = self.privacy.calibrated.as_ref()?;
        let run = self.validate().ok()?;
        Some(BudgetRequest {
            eps: c.epsilon,
            delta: c.delta,
            workers: self.task.workers,
            n1: self.task.shard_size_list().into_iter().min()?,
            batch: run.batch,
            iterations: run.total_updates,
            clip_bound: self.task.clip_bound,
        })
    }

    /// Noise for the run; calibrated configs go through the accountant and
    /// fail when no feasible bundle exists.
    pub fn noise(&self) -> anyhow::Result<(NoiseSpec, Option<PrivacyParams>)> {
        if let Some(sigma) = self.privacy.raw_sigma {
            return Ok((NoiseSpec::Raw { sigma2: sigma * sigma }, None));
        }
        let c = self.privacy.calibrated.as_ref().expect("validated");
        let req = self.budget_request().expect("validated");
        let params = match &c.mu {
            MuSetting::Fixed(mu) => privacy::calibrate_sigma(&req, *mu)?,
            MuSetting::Named(_) => match privacy::find_mu(&req, privacy::DEFAULT_MU_GRID)? {
                MuSearch::Feasible(p) => p,
                MuSearch::Infeasible { failed, .. } => {
                    let c = failed[0];
                    return Err(adp2sgd_core::Error::InfeasibleBudget {
                        constraint: c.name,
                        lhs: c.lhs,
                        rhs: c.rhs,
                    }
                    .into());
                }
            },
        };
        Ok((NoiseSpec::Calibrated(params.clone()), Some(params)))
    }

    pub fn run_config(&self, noise: NoiseSpec) -> anyhow::Result<RunConfig> {
        let run = self.validate()?;
        Ok(RunConfig {
            learning_rate: self.learning_rate.unwrap_or(0.0),
            lr_rule: self.lr_rule.unwrap_or(LrRule::Fixed),
            batch_size: self.batch_size,
            iterations: run.length,
            seed: self.seed,
            noise,
            scenario: run.scenario,
            activation: self.activation,
            snapshot: self.snapshot,
            staleness_guard: self.staleness_guard,
            probe_stride: self.probe_stride,
            initial_model: None,
            check_invariants: false,
        })
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    ExperimentConfig::from_json(&text)
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Adpsgd => "adpsgd",
            RunMode::Sync => "sync",
        })
    }
}
