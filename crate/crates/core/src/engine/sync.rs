//! The synchronous allreduce baseline.

use rand::Rng;

use super::event::{EventQueue, SimEvent};
use super::trace::{EventKind, Mode, RunSummary, TraceRecord, TraceSink, TrainingTrace};
use super::{eps_spent, probe, resolve, NoiseSpec, RunConfig};
use crate::error::{Error, Result};
use crate::privacy::{self, SpendLedger};
use crate::rng;
use crate::tasks::{sample_minibatch, Task};
use crate::topology::CommGraph;
use crate::vector::ModelVector;

/// Runs `cfg.iterations` rounds. In each round every worker computes a noisy
/// gradient at the common model and applies it locally (one global update
/// each); the barrier then replaces every local model by the average.
pub fn run_sync_into(
    task: &Task,
    graph: &CommGraph,
    cfg: &RunConfig,
    sink: &mut dyn TraceSink,
) -> Result<RunSummary> {
    let k = task.workers();
    let run = resolve(task, graph, cfg, k)?;
    let scenario = &cfg.scenario;
    let mut batches: Vec<_> = (0..k as u64).map(|i| rng::stream(cfg.seed, "worker", i)).collect();
    let mut noise: Vec<_> = (0..k as u64).map(|i| rng::stream(cfg.seed, "noise", i)).collect();
    let mut jitter: Vec<_> = (0..k as u64).map(|i| rng::stream(cfg.seed, "jitter", i)).collect();
    let mut ledger = match &cfg.noise {
        NoiseSpec::Calibrated(p) => Some((SpendLedger::new(), p.step_cost()?.eps_rdp)),
        NoiseSpec::Raw { .. } => None,
    };

    let mut common = run.initial.clone();
    let mut models = vec![common.clone(); k];
    let mut global_iter = 0;
    let mut now = 0.0;
    let mut queue = EventQueue::default();
    probe(task, &models, &cfg.noise, 0, 0.0, sink)?;

    for round in 0..cfg.iterations {
        let mut slowest: f64 = 0.0;
        for (worker, jitter_rng) in jitter.iter_mut().enumerate() {
            let j = if scenario.jitter > 0.0 {
                1.0 + jitter_rng.random_range(0.0..=scenario.jitter)
            } else {
                1.0
            };
            let duration = scenario.base_compute_time * scenario.multiplier(worker, round, k, cfg.seed) * j;
            slowest = slowest.max(duration);
            queue.push(now + duration, SimEvent::GradientReady { worker, tag: global_iter, compute_time: duration });
        }
        queue.push(now + slowest + scenario.allreduce_time, SimEvent::SyncBarrier { round });

        while let Some((time, event)) = queue.pop() {
            match event {
                SimEvent::GradientReady { worker, compute_time, .. } => {
                    let batch = sample_minibatch(task.shard(worker), run.batch, &mut batches[worker])?;
                    let g = task.minibatch_gradient(&common, worker, &batch)?;
                    let g = privacy::add_noise(&g, run.sigma2, &mut noise[worker])?;
                    models[worker].axpy(-run.eta, &g);
                    global_iter += 1;
                    if let Some((l, cost)) = ledger.as_mut() {
                        l.record(global_iter, *cost);
                    }
                    sink.record(TraceRecord {
                        virtual_time: time,
                        global_iter,
                        worker: Some(worker),
                        event: EventKind::GradientReady,
                        loss: None,
                        grad_norm_sq: None,
                        staleness: Some(0),
                        eps_spent: eps_spent(&cfg.noise, global_iter)?,
                        compute_time: Some(compute_time),
                    });
                }
                SimEvent::SyncBarrier { round } => {
                    common = ModelVector::mean(&models)?;
                    if !common.is_finite() {
                        return Err(Error::Numeric(format!("average model became non-finite in round {round}")));
                    }
                    for w in models.iter_mut() {
                        w.clone_from(&common);
                    }
                    now = time;
                    sink.record(TraceRecord {
                        virtual_time: time,
                        global_iter,
                        worker: None,
                        event: EventKind::SyncBarrier,
                        loss: None,
                        grad_norm_sq: None,
                        staleness: None,
                        eps_spent: eps_spent(&cfg.noise, global_iter)?,
                        compute_time: None,
                    });
                    let done = round + 1;
                    if done == cfg.iterations || done.is_multiple_of(cfg.probe_stride) {
                        probe(task, &models, &cfg.noise, global_iter, time, sink)?;
                    }
                }
                SimEvent::GossipExchange { .. } => unreachable!("no gossip in the synchronous run"),
            }
        }
    }

    Ok(RunSummary {
        mode: Mode::Sync,
        final_theta: common,
        total_virtual_time: now,
        iterations: global_iter,
        learning_rate: run.eta,
        lr_rule: cfg.lr_rule.as_str().to_string(),
        batch_size: run.batch,
        max_staleness: 0,
        rdp_spent: ledger.as_ref().map(|(l, _)| l.total()),
    })
}

/// Runs the synchronous baseline and keeps the whole trace in memory.
pub fn run_sync(task: &Task, graph: &CommGraph, cfg: &RunConfig) -> Result<TrainingTrace> {
    let mut trace = TrainingTrace::default();
    let summary = run_sync_into(task, graph, cfg, &mut trace)?;
    trace.summary = Some(summary);
    Ok(trace)
}
