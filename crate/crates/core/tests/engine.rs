//! Simulator behaviour: determinism, counters, invariants and timing arithmetic.

use adp2sgd_core::engine::{
    run_adpsgd, run_sync, throughput_of, throughput_summary, Activation, EventKind, LrRule, NoiseSpec, RunConfig,
    Scenario, ScenarioKind, SnapshotMode, TrainingTrace,
};
use adp2sgd_core::privacy::{calibrate_sigma, BudgetRequest};
use adp2sgd_core::tasks::{Task, TaskKind, TaskSpec};
use adp2sgd_core::topology::CommGraph;
use adp2sgd_core::{Error, ModelVector};

fn quadratic(workers: usize, shard: usize, dim: usize) -> Task {
    let mut s = TaskSpec::new(TaskKind::Quadratic, dim, workers, shard);
    s.data_seed = 3;
    s.build().unwrap()
}

fn updates(trace: &TrainingTrace) -> usize {
    trace.updates().count()
}

fn assert_well_formed(trace: &TrainingTrace) {
    let mut last_time = 0.0;
    let mut last_iter = 0;
    let mut last_eps = 0.0;
    for r in &trace.records {
        assert!(r.virtual_time >= last_time);
        last_time = r.virtual_time;
        if r.is_update() {
            assert_eq!(r.global_iter, last_iter + 1);
            last_iter = r.global_iter;
        } else {
            assert_eq!(r.global_iter, last_iter);
        }
        if let Some(e) = r.eps_spent {
            assert!(e >= last_eps);
            last_eps = e;
        }
    }
}

#[test]
fn adpsgd_is_deterministic_under_scenarios() {
    let task = quadratic(8, 20, 5);
    let g = CommGraph::ring(8).unwrap();
    let mut cfg = RunConfig::new(0.05, 4, 500, 17);
    cfg.noise = NoiseSpec::Raw { sigma2: 0.01 };
    cfg.scenario = Scenario { jitter: 0.3, comm_time: 0.05, ..Scenario::new(ScenarioKind::RandomSlow { factor: 2.0 }) };
    cfg.probe_stride = 7;
    let a = run_adpsgd(&task, &g, &cfg).unwrap();
    let b = run_adpsgd(&task, &g, &cfg).unwrap();
    assert_eq!(a, b);
    cfg.seed = 18;
    let c = run_adpsgd(&task, &g, &cfg).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn adpsgd_counts_exactly_t_updates() {
    let task = quadratic(4, 10, 3);
    let g = CommGraph::full_bipartite(4).unwrap();
    for activation in [Activation::Physical, Activation::Logical] {
        for snapshot in [SnapshotMode::Serialized, SnapshotMode::Interleaved] {
            let mut cfg = RunConfig::new(0.05, 2, 321, 1);
            cfg.activation = activation;
            cfg.snapshot = snapshot;
            cfg.scenario.comm_time = 0.3;
            cfg.probe_stride = 50;
            let t = run_adpsgd(&task, &g, &cfg).unwrap();
            assert_eq!(updates(&t), 321);
            assert_eq!(t.summary.as_ref().unwrap().iterations, 321);
            assert_well_formed(&t);
            // Probes at 0, every 50 updates, and the last update.
            let probes: Vec<usize> = t.probe_records().map(|r| r.global_iter).collect();
            assert_eq!(probes, vec![0, 50, 100, 150, 200, 250, 300, 321]);
            assert_eq!(t.probes.len(), probes.len());
        }
    }
}

#[test]
fn sync_counts_k_updates_per_round() {
    let task = quadratic(4, 10, 3);
    let g = CommGraph::complete(4).unwrap();
    let mut cfg = RunConfig::new(0.05, 2, 25, 1);
    cfg.probe_stride = 10;
    let t = run_sync(&task, &g, &cfg).unwrap();
    assert_eq!(updates(&t), 100);
    assert_eq!(t.records.iter().filter(|r| r.event == EventKind::SyncBarrier).count(), 25);
    assert_well_formed(&t);
    let probes: Vec<usize> = t.probe_records().map(|r| r.global_iter).collect();
    assert_eq!(probes, vec![0, 40, 80, 100]);
    assert_eq!(run_sync(&task, &g, &cfg).unwrap(), t);
}

#[test]
fn mean_is_preserved_by_averaging_and_moved_only_by_updates() {
    let task = quadratic(6, 10, 4);
    let g = CommGraph::complete(6).unwrap();
    for snapshot in [SnapshotMode::Serialized, SnapshotMode::Interleaved] {
        let mut cfg = RunConfig::new(0.1, 3, 2000, 5);
        cfg.noise = NoiseSpec::Raw { sigma2: 0.5 };
        cfg.snapshot = snapshot;
        cfg.check_invariants = true;
        cfg.scenario.jitter = 0.5;
        run_adpsgd(&task, &g, &cfg).unwrap();
    }
}

#[test]
fn logical_run_matches_a_direct_replay() {
    // Full-batch, unclipped gradients on a two-worker quadratic are
    // deterministic, so the run can be replayed from its worker sequence.
    let mut s = TaskSpec::new(TaskKind::Quadratic, 2, 2, 4);
    s.clipping = false;
    let task = s.build().unwrap();
    let g = CommGraph::ring(2).unwrap();
    let eta = 0.1;
    let mut cfg = RunConfig::new(eta, 4, 50, 2);
    cfg.activation = Activation::Logical;
    cfg.probe_stride = 1;
    cfg.initial_model = Some(ModelVector::from_vec(vec![3.0, -1.0]));
    let t = run_adpsgd(&task, &g, &cfg).unwrap();
    let centers: Vec<ModelVector> =
        (0..2).map(|k| task.shard_gradient(&ModelVector::zeros(2), k).unwrap().scaled(-1.0)).collect();
    let mut w = vec![ModelVector::from_vec(vec![3.0, -1.0]); 2];
    for (update, probe) in t.updates().zip(&t.probes[1..]) {
        let k = update.worker.unwrap();
        let grad = w[k].sub(&centers[k]);
        let mid = w[0].add(&w[1]).scaled(0.5);
        w = vec![mid.clone(), mid];
        w[k].axpy(-eta, &grad);
        let theta = w[0].add(&w[1]).scaled(0.5);
        assert!(theta.sub(&probe.theta).max_abs() < 1e-12);
    }
}

#[test]
fn staleness_guard() {
    let task = quadratic(8, 10, 3);
    let g = CommGraph::ring(8).unwrap();
    let mut cfg = RunConfig::new(0.05, 2, 400, 9);
    cfg.scenario.jitter = 1.0;
    let free = run_adpsgd(&task, &g, &cfg).unwrap();
    let tau = free.summary.as_ref().unwrap().max_staleness;
    assert!(tau > 2);
    assert_eq!(tau, free.updates().filter_map(|r| r.staleness).max().unwrap());
    cfg.staleness_guard = Some(tau);
    assert_eq!(run_adpsgd(&task, &g, &cfg).unwrap(), free);
    cfg.staleness_guard = Some(2);
    assert!(matches!(run_adpsgd(&task, &g, &cfg), Err(Error::StalenessGuard { bound: 2, .. })));
    cfg.activation = Activation::Logical;
    let logical = run_adpsgd(&task, &g, &cfg).unwrap();
    assert_eq!(logical.summary.unwrap().max_staleness, 0);
}

#[test]
fn noise_free_sync_decays_geometrically() {
    let mut s = TaskSpec::new(TaskKind::Quadratic, 4, 4, 8);
    s.clipping = false;
    let task = s.build().unwrap();
    let g = CommGraph::complete(4).unwrap();
    let eta = 0.01;
    let mut cfg = RunConfig::new(eta, 8, 1000, 0);
    cfg.probe_stride = 1;
    cfg.initial_model = Some(ModelVector::filled(4, 2.0));
    let t = run_sync(&task, &g, &cfg).unwrap();
    let opt = task.optimum().unwrap();
    let e0 = ModelVector::filled(4, 2.0).sub(opt);
    for (round, p) in t.probes.iter().enumerate() {
        assert_eq!(p.global_iter, 4 * round);
        let predicted = e0.scaled((1.0 - eta).powi(round as i32));
        assert!(p.theta.sub(opt).sub(&predicted).max_abs() < 1e-10, "round {round}");
    }
    for pair in t.probes.windows(2) {
        let ratio = pair[1].theta.sub(opt).norm() / pair[0].theta.sub(opt).norm();
        assert!((ratio - (1.0 - eta)).abs() < 1e-10);
    }
}

#[test]
fn noise_free_adpsgd_converges_on_two_workers() {
    let mut s = TaskSpec::new(TaskKind::Quadratic, 3, 2, 16);
    s.within_spread = 0.0;
    s.between_spread = 0.05;
    let task = s.build().unwrap();
    let g = CommGraph::ring(2).unwrap();
    let mut cfg = RunConfig::new(0.002, 1, 20_000, 0);
    cfg.probe_stride = 1000;
    cfg.initial_model = Some(ModelVector::filled(3, 0.5));
    let t = run_adpsgd(&task, &g, &cfg).unwrap();
    let first = t.probe_records().next().unwrap().grad_norm_sq.unwrap();
    let last = t.probe_records().last().unwrap().grad_norm_sq.unwrap();
    assert!(first > 0.1);
    assert!(last < 1e-6, "{last}");
}

#[test]
fn inverse_sqrt_rule_sets_the_learning_rate() {
    let task = quadratic(2, 16, 3);
    let g = CommGraph::ring(2).unwrap();
    let mut cfg = RunConfig::new(0.0, 16, 4096, 0);
    cfg.lr_rule = LrRule::InverseSqrt;
    let summary = run_adpsgd(&task, &g, &cfg).unwrap().summary.unwrap();
    assert_eq!(summary.lr_rule, "prop1");
    assert_eq!(summary.learning_rate, 2.0 / (16.0 * 64.0));
}

#[test]
fn random_slow_hits_each_worker_binomially() {
    let s = Scenario::new(ScenarioKind::RandomSlow { factor: 2.0 });
    let (k, n) = (16, 10_000);
    let mut hits = vec![0usize; k];
    for it in 0..n {
        for (w, h) in hits.iter_mut().enumerate() {
            if s.multiplier(w, it, k, 21) == 2.0 {
                *h += 1;
            }
        }
    }
    let p = 1.0 / k as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for h in hits {
        assert!((h as f64 - n as f64 * p).abs() <= 3.0 * sd, "{h}");
    }
}

#[test]
fn sync_round_time_is_barrier_arithmetic() {
    let task = quadratic(16, 4, 2);
    let g = CommGraph::ring(16).unwrap();
    let mut cfg = RunConfig::new(0.01, 1, 50, 4);
    for (t_c, t_a) in [(1.0, 0.25), (1.0, 0.1), (0.3, 0.7)] {
        let base = Scenario { base_compute_time: t_c, allreduce_time: t_a, ..Scenario::default() };
        cfg.scenario = base;
        let none = throughput_summary(&run_sync(&task, &g, &cfg).unwrap()).unwrap();
        cfg.scenario = Scenario { kind: ScenarioKind::RandomSlow { factor: 2.0 }, ..base };
        let slow = throughput_summary(&run_sync(&task, &g, &cfg).unwrap()).unwrap();
        assert_eq!(slow.round_times.len(), 50);
        for r in &slow.round_times {
            assert!((r - (2.0 * t_c + t_a)).abs() <= 1e-12 * (2.0 * t_c + t_a));
        }
        let ratio = slow.mean_round_time().unwrap() / none.mean_round_time().unwrap();
        assert!((ratio - (2.0 * t_c + t_a) / (t_c + t_a)).abs() < 1e-12);
    }
}

#[test]
fn adpsgd_mean_compute_time_under_random_slowdown() {
    let task = quadratic(16, 4, 2);
    let g = CommGraph::ring(16).unwrap();
    let mut cfg = RunConfig::new(0.01, 1, 10_000, 0);
    cfg.scenario = Scenario::new(ScenarioKind::RandomSlow { factor: 2.0 });
    cfg.probe_stride = 10_000;
    let s = throughput_summary(&run_adpsgd(&task, &g, &cfg).unwrap()).unwrap();
    let mean = s.mean_compute_time.unwrap();
    // One compute start in K is slowed 2x: expected time (K + 1)/K.
    assert!((mean / 1.0625 - 1.0).abs() < 0.005, "{mean}");
}

#[test]
fn adpsgd_straggler_throughput_matches_renewal_rate() {
    let task = quadratic(16, 4, 2);
    let g = CommGraph::ring(16).unwrap();
    let mut cfg = RunConfig::new(0.01, 1, 20_000, 0);
    cfg.probe_stride = 20_000;
    let base = throughput_summary(&run_adpsgd(&task, &g, &cfg).unwrap()).unwrap();
    let straggler = Scenario::new(ScenarioKind::FixedStraggler { worker: 5, factor: 10.0 });
    cfg.scenario = straggler;
    let t = run_adpsgd(&task, &g, &cfg).unwrap();
    let slow = throughput_summary(&t).unwrap();
    let predicted = straggler.renewal_rate(16) / Scenario::default().renewal_rate(16);
    assert!((predicted - 15.1 / 16.0).abs() < 1e-15);
    let ratio = slow.updates_per_time / base.updates_per_time;
    assert!((ratio / predicted - 1.0).abs() < 0.02, "{ratio}");
    // The straggler contributes at a tenth of a peer's rate.
    let by = |w| t.updates().filter(|r| r.worker == Some(w)).count() as f64;
    assert!((by(5) / by(0) - 0.1).abs() < 0.01);
}

#[test]
fn sync_straggler_round_is_ten_times_longer() {
    let task = quadratic(16, 4, 2);
    let g = CommGraph::ring(16).unwrap();
    let mut cfg = RunConfig::new(0.01, 1, 20, 0);
    cfg.scenario = Scenario { allreduce_time: 0.0, ..Scenario::default() };
    let base = throughput_summary(&run_sync(&task, &g, &cfg).unwrap()).unwrap();
    cfg.scenario.kind = ScenarioKind::FixedStraggler { worker: 3, factor: 10.0 };
    let slow = throughput_summary(&run_sync(&task, &g, &cfg).unwrap()).unwrap();
    assert_eq!(slow.mean_round_time().unwrap() / base.mean_round_time().unwrap(), 10.0);
}

#[test]
fn large_batch_scales_at_construction() {
    let task = quadratic(4, 32, 2);
    let g = CommGraph::ring(4).unwrap();
    let mut cfg = RunConfig::new(0.05, 4, 10, 0);
    cfg.scenario = Scenario::new(ScenarioKind::LargeBatch { batch_mult: 2.0, lr_mult: 2.0 });
    let s = run_adpsgd(&task, &g, &cfg).unwrap().summary.unwrap();
    assert_eq!(s.batch_size, 8);
    assert_eq!(s.learning_rate, 0.1);
    let s = run_sync(&task, &g, &cfg).unwrap().summary.unwrap();
    assert_eq!((s.batch_size, s.learning_rate), (8, 0.1));
}

fn calibrated_setup() -> (Task, CommGraph, RunConfig) {
    let task = quadratic(4, 500, 3);
    let g = CommGraph::ring(4).unwrap();
    let req = BudgetRequest { eps: 5.0, delta: 0.01, workers: 4, n1: 500, batch: 4, iterations: 80_000, clip_bound: 1.0 };
    let params = calibrate_sigma(&req, 0.5).unwrap();
    let mut cfg = RunConfig::new(0.01, 4, 80_000, 8);
    cfg.noise = NoiseSpec::Calibrated(params);
    cfg.probe_stride = 997;
    (task, g, cfg)
}

#[test]
fn calibrated_run_reports_per_iteration_budget() {
    let (task, g, cfg) = calibrated_setup();
    let t = run_adpsgd(&task, &g, &cfg).unwrap();
    for r in t.probe_records() {
        let expected = (r.global_iter as f64 / 80_000.0).sqrt() * 5.0;
        assert!((r.eps_spent.unwrap() - expected).abs() <= 1e-9);
    }
    assert_eq!(t.records.last().unwrap().eps_spent, Some(5.0));
    let p = cfg.noise.params().unwrap();
    let rdp = t.summary.unwrap().rdp_spent.unwrap();
    assert!((rdp / (80_000.0 * p.step_cost().unwrap().eps_rdp) - 1.0).abs() < 1e-12);
    assert_eq!(run_adpsgd(&task, &g, &cfg).unwrap().records, t.records);
}

#[test]
fn calibrated_run_refuses_mismatched_or_infeasible_bundles() {
    let (task, g, mut cfg) = calibrated_setup();
    cfg.iterations = 80_001;
    assert!(matches!(run_adpsgd(&task, &g, &cfg), Err(Error::Config(_))));
    // A SYNC run of 20000 rounds performs the calibrated 80000 updates.
    cfg.iterations = 20_000;
    assert!(run_sync(&task, &g, &cfg).is_ok());
    cfg.iterations = 80_000;
    if let NoiseSpec::Calibrated(p) = &mut cfg.noise {
        p.checks[1].holds = false;
    }
    assert!(matches!(run_adpsgd(&task, &g, &cfg), Err(Error::InfeasibleBudget { .. })));
}

#[test]
fn raw_mode_leaves_eps_empty() {
    let task = quadratic(4, 8, 2);
    let g = CommGraph::ring(4).unwrap();
    let t = run_adpsgd(&task, &g, &RunConfig::new(0.05, 2, 20, 0)).unwrap();
    assert!(t.records.iter().all(|r| r.eps_spent.is_none()));
}

#[test]
fn invalid_runs_are_rejected() {
    let task = quadratic(4, 8, 2);
    let g = CommGraph::ring(4).unwrap();
    let mut cfg = RunConfig::new(0.05, 9, 20, 0);
    assert!(matches!(run_adpsgd(&task, &g, &cfg), Err(Error::InvalidBatch(_))));
    cfg.batch_size = 2;
    cfg.probe_stride = 0;
    assert!(matches!(run_adpsgd(&task, &g, &cfg), Err(Error::Domain(_))));
    cfg.probe_stride = 1;
    assert!(run_adpsgd(&task, &CommGraph::ring(6).unwrap(), &cfg).is_err());
    assert!(matches!(throughput_of(&[]), Err(Error::EmptyTrace)));
}

#[test]
fn convergence_report_follows_sync_closed_form() {
    use adp2sgd_core::analysis::{convergence_report, ProbeCollector};
    use adp2sgd_core::engine::run_sync_into;

    let mut s = TaskSpec::new(TaskKind::Quadratic, 4, 4, 8);
    s.clipping = false;
    let task = s.build().unwrap();
    let g = CommGraph::complete(4).unwrap();
    let eta = 0.02;
    let mut cfg = RunConfig::new(eta, 8, 300, 0);
    cfg.probe_stride = 1;
    cfg.initial_model = Some(ModelVector::filled(4, 1.5));
    let t = run_sync(&task, &g, &cfg).unwrap();
    let e0 = ModelVector::filled(4, 1.5).sub(task.optimum().unwrap()).norm_sq();
    let report = convergence_report(&t, &task, 4, None).unwrap();
    assert_eq!(report.probes.len(), 301);
    for p in &report.probes {
        let round = (p.global_iter / 4) as i32;
        let expected = (1.0 - eta).powi(2 * round) * e0;
        assert!((p.grad_norm_sq - expected).abs() <= 1e-10 * e0);
    }
    let coarse = convergence_report(&t, &task, 40, None).unwrap();
    let iters: Vec<usize> = coarse.probes.iter().map(|p| p.global_iter).collect();
    assert_eq!(iters, (0..=30).map(|i| 40 * i).collect::<Vec<_>>());
    let mean = coarse.running_mean.last().unwrap();
    let direct = coarse.probes.iter().map(|p| p.grad_norm_sq).sum::<f64>() / coarse.probes.len() as f64;
    assert!((mean - direct).abs() <= 1e-15 * direct);
    assert!(convergence_report(&t, &task, 0, None).is_err());

    let mut collector = ProbeCollector::default();
    let summary = run_sync_into(&task, &g, &cfg, &mut collector).unwrap();
    let streamed = collector.report(summary.iterations, summary.learning_rate, None).unwrap();
    assert_eq!(streamed, report);
}
