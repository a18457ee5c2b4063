//! Subcommand implementations. Each returns data; printing and exit codes
//! are left to the binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adp2sgd_core::analysis::{
    self, BoundInputs, ConvergenceReport, PrivacyInputs, RateCheck, ConvergenceConstants,
};
use adp2sgd_core::engine::{
    self, throughput_of, throughput_summary, EventKind, RunSummary, ThroughputSummary, TrainingTrace,
};
use adp2sgd_core::privacy::{self, FeasibilityCheck, MuSearch, PrivacyParams};
use adp2sgd_core::rng;
use adp2sgd_core::topology::{estimate_spectral_gap, SpectralEstimate, SpectralMode};
use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, MuSetting, RunMode};
use crate::trace_file::{self, write_atomic, TraceHeader};

/// Result of `calibrate`.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub params: PrivacyParams,
    /// Set when `mu` came from the grid search.
    pub searched: bool,
}

impl Calibration {
    pub fn feasible(&self) -> bool {
        self.params.is_feasible()
    }

    pub fn failed(&self) -> Vec<FeasibilityCheck> {
        self.params.checks.iter().filter(|c| !c.holds).copied().collect()
    }

    /// Human-readable bundle and feasibility table.
    pub fn render(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        let mu_note = if self.searched { " (chosen by grid search)" } else { "" };
        let _ = writeln!(s, "eps      {}", p.eps);
        let _ = writeln!(s, "delta    {}", p.delta);
        let _ = writeln!(s, "mu       {}{mu_note}", p.mu);
        let _ = writeln!(s, "alpha    {:.6}", p.alpha);
        let _ = writeln!(s, "sigma^2  {:.5e}", p.sigma2);
        let _ = writeln!(s, "gamma    {:.6e}", p.gamma);
        let _ = writeln!(s, "Delta2   {:.6e}", p.delta2);
        let _ = writeln!(s);
        let width = p.checks.iter().map(|c| c.name.chars().count()).max().unwrap_or(0);
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>14}  ok", "check", "lhs", "rhs");
        for c in &p.checks {
            let mark = if c.holds { "✓" } else { "✗" };
            let _ = writeln!(s, "{:<width$}  {:>14.6e}  {:>14.6e}  {mark}", c.name, c.lhs, c.rhs);
        }
        s
    }
}

/// Evaluates the calibration for a calibrated config. `mu` overrides the
/// config's setting. Infeasible bundles are returned, not raised.
pub fn calibrate(cfg: &ExperimentConfig, mu: Option<MuSetting>) -> anyhow::Result<Calibration> {
    let Some(spec) = &cfg.privacy.calibrated else {
        bail!("calibrate needs privacy.calibrated in the config");
    };
    let req = cfg.budget_request().context("config does not describe a budget")?;
    let mu = mu.unwrap_or_else(|| spec.mu.clone());
    match mu {
        MuSetting::Fixed(m) => Ok(Calibration { params: privacy::evaluate_calibration(&req, m)?, searched: false }),
        m if m.is_auto() => {
            let params = match privacy::find_mu(&req, privacy::DEFAULT_MU_GRID)? {
                MuSearch::Feasible(p) => p,
                MuSearch::Infeasible { closest, .. } => closest,
            };
            Ok(Calibration { params, searched: true })
        }
        MuSetting::Named(other) => bail!("mu must be a number or `auto`, got `{other}`"),
    }
}

/// Everything `run` writes besides the trace.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config_sha256: String,
    pub seed: u64,
    pub mode: String,
    pub summary: RunSummary,
    pub throughput: ThroughputSummary,
    pub convergence: ConvergenceReport,
    pub spectral: SpectralEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConvergenceConstants>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacyParams>,
    /// Analysis quantities that could not be evaluated for this run, and why.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace_path: PathBuf,
    pub report_path: PathBuf,
    pub report: RunReport,
    pub trace: TrainingTrace,
}

/// Runs one simulation and writes trace and report into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<RunOutcome> {
    let task = cfg.task.build().context("building task")?;
    let graph = cfg.graph.build(cfg.task.workers).context("building graph")?;
    let (noise, params) = cfg.noise()?;
    let sigma2 = noise.sigma2();
    let run_cfg = cfg.run_config(noise)?;
    log::info!(
        "running {} on {} workers for {} {}",
        cfg.mode,
        cfg.task.workers,
        run_cfg.iterations,
        if cfg.mode == RunMode::Sync { "rounds" } else { "iterations" }
    );
    let trace = match cfg.mode {
        RunMode::Adpsgd => engine::run_adpsgd(&task, &graph, &run_cfg)?,
        RunMode::Sync => engine::run_sync(&task, &graph, &run_cfg)?,
    };
    let summary = trace.summary.clone().context("engine returned no summary")?;
    log::debug!("{} trace rows, virtual time {}", trace.records.len(), summary.total_virtual_time);

    let spectral = estimate_spectral_gap(&graph, SpectralMode::Exact, &mut rng::stream(cfg.seed, "spectral", 0))?;
    let mut notes = Vec::new();
    let initial_loss = trace
        .probe_records()
        .next()
        .and_then(|r| r.loss)
        .context("trace has no initial probe")?;
    let inputs = match BoundInputs::from_task(&task, initial_loss, sigma2, summary.batch_size) {
        Ok(i) => Some(i),
        Err(e) => {
            notes.push(format!("utility bounds: {e}"));
            None
        }
    };
    let check = match (cfg.mode, inputs) {
        (RunMode::Adpsgd, Some(inputs)) => Some(RateCheck { inputs, workers: cfg.task.workers, rho: spectral.rho }),
        _ => None,
    };
    let stride = match cfg.mode {
        RunMode::Adpsgd => cfg.probe_stride,
        RunMode::Sync => cfg.probe_stride * cfg.task.workers,
    };
    let convergence = analysis::convergence_report(&trace, &task, stride, check.as_ref())?;
    let constants = match cfg.mode {
        RunMode::Adpsgd => match convergence_constants(&summary, &task, inputs, params.as_ref(), spectral.rho) {
            Ok(t) => Some(t),
            Err(e) => {
                notes.push(format!("convergence constants: {e}"));
                None
            }
        },
        RunMode::Sync => None,
    };
    let throughput = throughput_summary(&trace)?;

    let hash = cfg.hash();
    let report = RunReport {
        config_sha256: hash.clone(),
        seed: cfg.seed,
        mode: cfg.mode.to_string(),
        summary,
        throughput,
        convergence,
        spectral,
        constants,
        privacy: params,
        notes,
    };

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let trace_path = out_dir.join(&cfg.output.trace);
    let report_path = out_dir.join(&cfg.output.report);
    trace_file::write_trace_atomic(&trace_path, &TraceHeader::new(hash, cfg.seed), &trace.records)
        .with_context(|| format!("writing {}", trace_path.display()))?;
    write_atomic(&report_path, |f| -> anyhow::Result<()> {
        serde_json::to_writer_pretty(&mut *f, &report)?;
        std::io::Write::write_all(f, b"\n")?;
        Ok(())
    })
    .with_context(|| format!("writing {}", report_path.display()))?;
    log::info!("wrote {} and {}", trace_path.display(), report_path.display());
    Ok(RunOutcome { trace_path, report_path, report, trace })
}

fn convergence_constants(
    summary: &RunSummary,
    task: &adp2sgd_core::tasks::Task,
    inputs: Option<BoundInputs>,
    params: Option<&PrivacyParams>,
    rho: f64,
) -> anyhow::Result<ConvergenceConstants> {
    let k = task.workers();
    let tau = summary.max_staleness as f64;
    let l = task.lipschitz_grad();
    let mut constants =
        analysis::descent_constants(summary.learning_rate, summary.batch_size as f64, l, tau, k, rho)?;
    if let Some(inputs) = inputs {
        let t_min = analysis::rate_threshold(l, k, tau, rho)?;
        let rhs = analysis::rate_bound(&inputs, summary.iterations)?;
        constants = constants.with_rate(t_min, rhs);
        if let Some(p) = params {
            let package = analysis::private_rate_package(
                &inputs,
                &PrivacyInputs { mu: p.mu, workers: k, n1: p.n1, eps: p.eps, delta: p.delta, clip_bound: p.clip_bound },
            )?;
            constants = constants.with_privacy(&package);
        }
    }
    Ok(constants)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
    /// `a / b`; exactly 1 when the two values are equal.
    pub ratio: f64,
}

fn trace_metrics(records: &[engine::TraceRecord]) -> anyhow::Result<[(&'static str, f64); 4]> {
    let probes: Vec<_> = records.iter().filter(|r| r.event == EventKind::MetricProbe).collect();
    let last = probes.last().context("trace has no metric probes")?;
    let grads: Vec<f64> = probes.iter().filter_map(|r| r.grad_norm_sq).collect();
    let mean_grad = grads.iter().sum::<f64>() / grads.len().max(1) as f64;
    let throughput = throughput_of(records)?;
    Ok([
        ("final_loss", last.loss.unwrap_or(f64::NAN)),
        ("mean_grad_norm_sq", mean_grad),
        ("wall_time", throughput.wall_time),
        ("updates_per_time", throughput.updates_per_time),
    ])
}

/// Compares two trace files metric by metric.
pub fn compare(a: &Path, b: &Path) -> anyhow::Result<Vec<MetricRow>> {
    let ta = trace_file::read_trace_file(a).with_context(|| format!("reading {}", a.display()))?;
    let tb = trace_file::read_trace_file(b).with_context(|| format!("reading {}", b.display()))?;
    let ma = trace_metrics(&ta.records)?;
    let mb = trace_metrics(&tb.records)?;
    Ok(ma
        .iter()
        .zip(mb.iter())
        .map(|(&(metric, a), &(_, b))| MetricRow { metric, a, b, ratio: if a == b { 1.0 } else { a / b } })
        .collect())
}

pub fn render_comparison(rows: &[MetricRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "a", "b", "ratio"])?;
    for r in rows {
        w.write_record([r.metric.to_string(), r.a.to_string(), r.b.to_string(), r.ratio.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Per-seed result of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub wall_time: f64,
    pub updates_per_time: f64,
}

/// Runs the config once per seed, in parallel, each into `out_dir/seed-<n>`.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> anyhow::Result<Vec<SweepRow>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            let outcome = run(&c, &out_dir.join(format!("seed-{seed}")))?;
            let r = &outcome.report;
            Ok(SweepRow {
                seed,
                final_loss: r.convergence.final_loss,
                final_grad_norm_sq: r.convergence.final_grad_norm_sq,
                wall_time: r.throughput.wall_time,
                updates_per_time: r.throughput.updates_per_time,
            })
        })
        .collect()
}

pub fn render_sweep(rows: &[SweepRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "final_loss", "final_grad_norm_sq", "wall_time", "updates_per_time"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.final_loss.to_string(),
            r.final_grad_norm_sq.to_string(),
            r.wall_time.to_string(),
            r.updates_per_time.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
