//! The asynchronous gossip run.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::event::{EventQueue, SimEvent};
use super::trace::{EventKind, Mode, RunSummary, TraceRecord, TraceSink, TrainingTrace};
use super::{eps_spent, probe, resolve, Activation, MeanTracker, NoiseSpec, Resolved, RunConfig, SnapshotMode};
use crate::error::{Error, Result};
use crate::privacy::{self, SpendLedger};
use crate::rng::{self, SeededRng};
use crate::tasks::{sample_minibatch, Task};
use crate::topology::{average_pair_in_place, sample_gossip_matrix, CommGraph};
use crate::vector::ModelVector;

struct Worker {
    snapshot: ModelVector,
    /// Global iteration at which `snapshot` was read.
    tag: usize,
    batches: SeededRng,
    noise: SeededRng,
    gossip: SeededRng,
    jitter: SeededRng,
}

struct World<'a> {
    task: &'a Task,
    graph: &'a CommGraph,
    cfg: &'a RunConfig,
    run: Resolved,
    models: Vec<ModelVector>,
    workers: Vec<Worker>,
    global_iter: usize,
    max_staleness: usize,
    ledger: Option<(SpendLedger, f64)>,
    tracker: Option<MeanTracker>,
}

impl<'a> World<'a> {
    fn new(task: &'a Task, graph: &'a CommGraph, cfg: &'a RunConfig) -> Result<Self> {
        let run = resolve(task, graph, cfg, 1)?;
        let k = task.workers();
        let models = vec![run.initial.clone(); k];
        let workers = (0..k as u64)
            .map(|i| Worker {
                snapshot: run.initial.clone(),
                tag: 0,
                batches: rng::stream(cfg.seed, "worker", i),
                noise: rng::stream(cfg.seed, "noise", i),
                gossip: rng::stream(cfg.seed, "gossip", i),
                jitter: rng::stream(cfg.seed, "jitter", i),
            })
            .collect();
        let ledger = match &cfg.noise {
            NoiseSpec::Calibrated(p) => Some((SpendLedger::new(), p.step_cost()?.eps_rdp)),
            NoiseSpec::Raw { .. } => None,
        };
        let tracker = cfg.check_invariants.then(|| MeanTracker::new(&models));
        Ok(Self {
            task,
            graph,
            cfg,
            run,
            models,
            workers,
            global_iter: 0,
            max_staleness: 0,
            ledger,
            tracker,
        })
    }

    fn noisy_gradient(&mut self, worker: usize, point: &ModelVector) -> Result<ModelVector> {
        let w = &mut self.workers[worker];
        let batch = sample_minibatch(self.task.shard(worker), self.run.batch, &mut w.batches)?;
        let g = self.task.minibatch_gradient(point, worker, &batch)?;
        privacy::add_noise(&g, self.run.sigma2, &mut w.noise)
    }

    /// Gossip with a random neighbour, then `w_k <- w_k - eta g`. Returns true
    /// when the run has reached its last update.
    fn apply_update(
        &mut self,
        worker: usize,
        tag: usize,
        gradient: &ModelVector,
        time: f64,
        compute_time: Option<f64>,
        sink: &mut dyn TraceSink,
    ) -> Result<bool> {
        let a = sample_gossip_matrix(self.graph, worker, &mut self.workers[worker].gossip)?;
        average_pair_in_place(&mut self.models, &a)?;
        if let Some(t) = self.tracker.as_mut() {
            t.verify(&self.models, "gossip exchange")?;
        }
        self.models[worker].axpy(-self.run.eta, gradient);
        if let Some(t) = self.tracker.as_mut() {
            t.shift(-self.run.eta, gradient);
            t.verify(&self.models, "local update")?;
        }
        if !self.models[worker].is_finite() {
            return Err(Error::Numeric(format!(
                "worker {worker} model became non-finite at iteration {}",
                self.global_iter
            )));
        }
        let staleness = self.global_iter - tag;
        if let Some(bound) = self.cfg.staleness_guard {
            if staleness > bound {
                return Err(Error::StalenessGuard { staleness, bound });
            }
        }
        self.max_staleness = self.max_staleness.max(staleness);
        self.global_iter += 1;
        if let Some((ledger, cost)) = self.ledger.as_mut() {
            ledger.record(self.global_iter, *cost);
        }
        sink.record(TraceRecord {
            virtual_time: time,
            global_iter: self.global_iter,
            worker: Some(worker),
            event: EventKind::GossipExchange,
            loss: None,
            grad_norm_sq: None,
            staleness: Some(staleness),
            eps_spent: eps_spent(&self.cfg.noise, self.global_iter)?,
            compute_time,
        });
        let done = self.global_iter == self.run.total_updates;
        if done || self.global_iter.is_multiple_of(self.cfg.probe_stride) {
            probe(self.task, &self.models, &self.cfg.noise, self.global_iter, time, sink)?;
        }
        Ok(done)
    }

    /// Snapshot the local model and schedule the end of the computation.
    fn start_compute(&mut self, worker: usize, now: f64, queue: &mut EventQueue) {
        let scenario = &self.cfg.scenario;
        let k = self.models.len();
        let w = &mut self.workers[worker];
        w.snapshot = self.models[worker].clone();
        w.tag = self.global_iter;
        let jitter = if scenario.jitter > 0.0 {
            1.0 + w.jitter.random_range(0.0..=scenario.jitter)
        } else {
            1.0
        };
        let duration =
            scenario.base_compute_time * scenario.multiplier(worker, self.global_iter, k, self.cfg.seed) * jitter;
        queue.push(now + duration, SimEvent::GradientReady { worker, tag: self.global_iter, compute_time: duration });
    }

    fn run_physical(&mut self, sink: &mut dyn TraceSink) -> Result<f64> {
        let mut queue = EventQueue::default();
        for k in 0..self.models.len() {
            self.start_compute(k, 0.0, &mut queue);
        }
        while let Some((time, event)) = queue.pop() {
            match event {
                SimEvent::GradientReady { worker, tag, compute_time } => {
                    let snapshot = std::mem::take(&mut self.workers[worker].snapshot);
                    let gradient = self.noisy_gradient(worker, &snapshot)?;
                    self.workers[worker].snapshot = snapshot;
                    queue.push(
                        time + self.cfg.scenario.comm_time,
                        SimEvent::GossipExchange { worker, tag, compute_time, gradient },
                    );
                    if self.cfg.snapshot == SnapshotMode::Interleaved {
                        self.start_compute(worker, time, &mut queue);
                    }
                }
                SimEvent::GossipExchange { worker, tag, compute_time, gradient } => {
                    if self.apply_update(worker, tag, &gradient, time, Some(compute_time), sink)? {
                        return Ok(time);
                    }
                    if self.cfg.snapshot == SnapshotMode::Serialized {
                        self.start_compute(worker, time, &mut queue);
                    }
                }
                SimEvent::SyncBarrier { .. } => unreachable!("no barriers in the asynchronous run"),
            }
        }
        Err(Error::Invariant("event queue drained before the last update".into()))
    }

    fn run_logical(&mut self, sink: &mut dyn TraceSink) -> Result<f64> {
        let mut activation = rng::stream(self.cfg.seed, "activation", 0);
        let pick = WeightedIndex::new(self.task.weights())
            .map_err(|e| Error::Config(format!("invalid worker weights: {e}")))?;
        loop {
            let worker = pick.sample(&mut activation);
            let point = self.models[worker].clone();
            let gradient = self.noisy_gradient(worker, &point)?;
            if self.apply_update(worker, self.global_iter, &gradient, 0.0, None, sink)? {
                return Ok(0.0);
            }
        }
    }
}

/// Runs the asynchronous algorithm, streaming records into `sink`.
pub fn run_adpsgd_into(
    task: &Task,
    graph: &CommGraph,
    cfg: &RunConfig,
    sink: &mut dyn TraceSink,
) -> Result<RunSummary> {
    let mut world = World::new(task, graph, cfg)?;
    probe(task, &world.models, &cfg.noise, 0, 0.0, sink)?;
    let total_time = match cfg.activation {
        Activation::Physical => world.run_physical(sink)?,
        Activation::Logical => world.run_logical(sink)?,
    };
    Ok(RunSummary {
        mode: Mode::Adpsgd,
        final_theta: ModelVector::mean(&world.models)?,
        total_virtual_time: total_time,
        iterations: world.global_iter,
        learning_rate: world.run.eta,
        lr_rule: cfg.lr_rule.as_str().to_string(),
        batch_size: world.run.batch,
        max_staleness: world.max_staleness,
        rdp_spent: world.ledger.as_ref().map(|(l, _)| l.total()),
    })
}

/// Runs the asynchronous algorithm and keeps the whole trace in memory.
pub fn run_adpsgd(task: &Task, graph: &CommGraph, cfg: &RunConfig) -> Result<TrainingTrace> {
    let mut trace = TrainingTrace::default();
    let summary = run_adpsgd_into(task, graph, cfg, &mut trace)?;
    trace.summary = Some(summary);
    Ok(trace)
}
