//! Deterministic discrete-event simulator.
//!
//! [`run_adpsgd`] runs the asynchronous gossip algorithm: a worker reads a
//! snapshot of its local model, computes a clipped, noised minibatch gradient,
//! averages its model with one random neighbour, and then applies the gradient
//! to its averaged model. [`run_sync`] is the synchronous baseline where every
//! round ends in an allreduce barrier.
//!
//! Two activation views are available. In [`Activation::Physical`] mode the
//! worker whose computation finishes next in virtual time is activated, and
//! snapshots go stale while neighbours gossip into the worker. In
//! [`Activation::Logical`] mode the active worker is drawn i.i.d. each
//! iteration and every event takes zero time, so staleness is zero.

mod adpsgd;
mod event;
pub mod scenario;
mod sync;
pub mod trace;

use serde::{Deserialize, Serialize};

pub use adpsgd::{run_adpsgd, run_adpsgd_into};
pub use scenario::{Scenario, ScenarioKind};
pub use sync::{run_sync, run_sync_into};
pub use trace::{
    throughput_of, throughput_summary, EventKind, Mode, NullSink, ProbeState, RunSummary, ThroughputSummary,
    TraceRecord, TraceSink, TrainingTrace,
};

use crate::error::{Error, Result};
use crate::privacy::{self, PrivacyParams};
use crate::tasks::Task;
use crate::topology::CommGraph;
use crate::vector::ModelVector;

/// Where the gradient noise variance comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    /// A fixed per-coordinate variance with no privacy accounting.
    Raw { sigma2: f64 },
    /// A calibrated bundle; the run must match its `B`, `T`, `K`, `n_(1)` and `G`.
    Calibrated(PrivacyParams),
}

impl NoiseSpec {
    pub fn sigma2(&self) -> f64 {
        match self {
            NoiseSpec::Raw { sigma2 } => *sigma2,
            NoiseSpec::Calibrated(p) => p.sigma2,
        }
    }

    pub fn params(&self) -> Option<&PrivacyParams> {
        match self {
            NoiseSpec::Raw { .. } => None,
            NoiseSpec::Calibrated(p) => Some(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Physical,
    Logical,
}

/// When a worker takes its next snapshot in physical mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    /// The next computation starts after the worker's own gossip and update.
    #[default]
    Serialized,
    /// The next computation starts as soon as the gradient is ready, in
    /// parallel with the gossip exchange.
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRule {
    #[default]
    Fixed,
    /// `eta = K / (B sqrt(T))` over the total number of model updates.
    #[serde(rename = "prop1")]
    InverseSqrt,
}

impl LrRule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrRule::Fixed => "fixed",
            LrRule::InverseSqrt => "prop1",
        }
    }
}

/// `eta = K / (B sqrt(T))`.
pub fn inverse_sqrt_learning_rate(workers: usize, batch: usize, iterations: usize) -> f64 {
    workers as f64 / (batch as f64 * (iterations as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Used as-is under [`LrRule::Fixed`], ignored under [`LrRule::InverseSqrt`].
    pub learning_rate: f64,
    pub lr_rule: LrRule,
    pub batch_size: usize,
    /// Model updates for the asynchronous run, rounds for the synchronous one.
    pub iterations: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub scenario: Scenario,
    pub activation: Activation,
    pub snapshot: SnapshotMode,
    /// Fail the run when an update's staleness exceeds this bound.
    pub staleness_guard: Option<usize>,
    /// Probe the average model every this many updates (rounds for SYNC).
    pub probe_stride: usize,
    /// Starting point of every local model; the task default when `None`.
    pub initial_model: Option<ModelVector>,
    /// Recheck mean preservation at every averaging and update event.
    pub check_invariants: bool,
}

impl RunConfig {
    pub fn new(learning_rate: f64, batch_size: usize, iterations: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            lr_rule: LrRule::Fixed,
            batch_size,
            iterations,
            seed,
            noise: NoiseSpec::Raw { sigma2: 0.0 },
            scenario: Scenario::default(),
            activation: Activation::Physical,
            snapshot: SnapshotMode::Serialized,
            staleness_guard: None,
            probe_stride: 100,
            initial_model: None,
            check_invariants: false,
        }
    }
}

/// Hyperparameters after scenario scaling and learning-rate derivation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Resolved {
    pub batch: usize,
    pub eta: f64,
    /// Total number of model updates.
    pub total_updates: usize,
    pub sigma2: f64,
    pub initial: ModelVector,
}

/// Validates a run and derives the effective hyperparameters. `updates_per_iteration`
/// is 1 for the asynchronous run and `K` for SYNC rounds.
pub(crate) fn resolve(task: &Task, graph: &CommGraph, cfg: &RunConfig, updates_per_iteration: usize) -> Result<Resolved> {
    let k = task.workers();
    if graph.workers() != k {
        return Err(Error::Config(format!("graph has {} workers, task has {k}", graph.workers())));
    }
    if cfg.iterations == 0 {
        return Err(Error::Config("iterations must be >= 1".into()));
    }
    if cfg.probe_stride == 0 {
        return Err(Error::Domain("probe stride must be >= 1".into()));
    }
    cfg.scenario.validate(k)?;
    let total_updates = cfg.iterations * updates_per_iteration;
    let (batch, lr_scale) = cfg.scenario.scale_hyperparameters(cfg.batch_size, 1.0);
    let base_eta = match cfg.lr_rule {
        LrRule::Fixed => cfg.learning_rate,
        LrRule::InverseSqrt => inverse_sqrt_learning_rate(k, batch, total_updates),
    };
    let eta = base_eta * lr_scale;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {eta}")));
    }
    if batch == 0 || batch > task.min_shard_size() {
        return Err(Error::InvalidBatch(format!(
            "batch size {batch} not in 1..={}",
            task.min_shard_size()
        )));
    }
    let sigma2 = cfg.noise.sigma2();
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {sigma2}")));
    }
    if let NoiseSpec::Calibrated(p) = &cfg.noise {
        check_calibration(p, task, batch, total_updates)?;
    }
    let initial = match &cfg.initial_model {
        Some(w) if w.dim() != task.dim() => {
            return Err(Error::Shape(format!("initial model has dim {}, task has {}", w.dim(), task.dim())))
        }
        Some(w) => w.clone(),
        None => task.default_init(cfg.seed),
    };
    Ok(Resolved { batch, eta, total_updates, sigma2, initial })
}

fn check_calibration(p: &PrivacyParams, task: &Task, batch: usize, total_updates: usize) -> Result<()> {
    if let Some(c) = p.checks.iter().find(|c| !c.holds) {
        return Err(Error::InfeasibleBudget { constraint: c.name, lhs: c.lhs, rhs: c.rhs });
    }
    let mismatch = |what: &str, bundle: String, run: String| {
        Err(Error::Config(format!(
            "calibrated bundle has {what} = {bundle} but the run uses {run}"
        )))
    };
    if !task.clipping() {
        return Err(Error::Config("calibrated privacy requires gradient clipping".into()));
    }
    if p.batch != batch {
        return mismatch("B", p.batch.to_string(), batch.to_string());
    }
    if p.iterations != total_updates {
        return mismatch("T", p.iterations.to_string(), total_updates.to_string());
    }
    if p.workers != task.workers() {
        return mismatch("K", p.workers.to_string(), task.workers().to_string());
    }
    if p.n1 != task.min_shard_size() {
        return mismatch("n_(1)", p.n1.to_string(), task.min_shard_size().to_string());
    }
    if p.clip_bound != task.clip_bound() {
        return mismatch("G", p.clip_bound.to_string(), task.clip_bound().to_string());
    }
    Ok(())
}

/// Spent budget after `t` updates, in calibrated mode.
pub(crate) fn eps_spent(noise: &NoiseSpec, t: usize) -> Result<Option<f64>> {
    noise.params().map(|p| privacy::per_iteration_epsilon(t, p)).transpose()
}

/// Probe record and state for the average of the local models.
pub(crate) fn probe(
    task: &Task,
    models: &[ModelVector],
    noise: &NoiseSpec,
    global_iter: usize,
    virtual_time: f64,
    sink: &mut dyn TraceSink,
) -> Result<()> {
    let theta = ModelVector::mean(models)?;
    let loss = task.loss(&theta)?;
    let grad = task.full_gradient(&theta)?;
    sink.record(TraceRecord {
        virtual_time,
        global_iter,
        worker: None,
        event: EventKind::MetricProbe,
        loss: Some(loss),
        grad_norm_sq: Some(grad.norm_sq()),
        staleness: None,
        eps_spent: eps_spent(noise, global_iter)?,
        compute_time: None,
    });
    sink.probe(ProbeState { global_iter, virtual_time, theta });
    Ok(())
}

/// Tracks `sum_k w_k` independently of the models to confirm that averaging
/// preserves it and an update moves it by exactly `-eta g`.
#[derive(Debug)]
pub(crate) struct MeanTracker {
    expected: ModelVector,
}

impl MeanTracker {
    const TOL: f64 = 1e-12;

    pub fn new(models: &[ModelVector]) -> Self {
        let mut expected = ModelVector::zeros(models[0].dim());
        for w in models {
            expected.axpy(1.0, w);
        }
        Self { expected }
    }

    pub fn shift(&mut self, alpha: f64, g: &ModelVector) {
        self.expected.axpy(alpha, g);
    }

    pub fn verify(&mut self, models: &[ModelVector], context: &str) -> Result<()> {
        let mut actual = ModelVector::zeros(self.expected.dim());
        for w in models {
            actual.axpy(1.0, w);
        }
        let k = models.len() as f64;
        let scale = models.iter().map(ModelVector::max_abs).fold(1.0, f64::max);
        let err = actual.sub(&self.expected).max_abs() / k;
        if err > Self::TOL * scale {
            return Err(Error::Invariant(format!(
                "model mean drifted by {err:e} at {context}"
            )));
        }
        // Resynchronize so rounding does not accumulate across events.
        self.expected = actual;
        Ok(())
    }
}
