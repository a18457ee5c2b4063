//! Closed-form convergence constants and trace-based convergence reports.
//!
//! The constants are evaluated exactly as printed; they are pure functions of
//! their inputs. [`convergence_report`] recomputes `||grad F(theta^t)||^2` at
//! every probe of a trace and compares the running mean against the
//! `O(1/sqrt(T))` bound when the inputs for that bound are supplied.

use serde::{Deserialize, Serialize};

use crate::engine::{EventKind, TraceRecord, TraceSink, TrainingTrace};
use crate::error::{Error, Result};
use crate::tasks::Task;
use crate::topology;

/// Convergence constants with their admissibility flags. The threshold and
/// bound fields are filled in by [`ConvergenceConstants::with_rate`] and
/// [`ConvergenceConstants::with_privacy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    pub rho_bar: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c1_positive: bool,
    pub c2_nonnegative: bool,
    pub c3_at_most_one: bool,
    pub t_min: Option<f64>,
    pub utility_rhs: Option<f64>,
    pub c4: Option<f64>,
    pub priv_t: Option<f64>,
    pub priv_utility_rhs: Option<f64>,
}

impl ConvergenceConstants {
    pub fn admissible(&self) -> bool {
        self.c1_positive && self.c2_nonnegative && self.c3_at_most_one
    }

    pub fn with_rate(mut self, t_min: f64, utility_rhs: f64) -> Self {
        self.t_min = Some(t_min);
        self.utility_rhs = Some(utility_rhs);
        self
    }

    pub fn with_privacy(mut self, package: &PrivacyUtility) -> Self {
        self.c4 = Some(package.c4);
        self.priv_t = Some(package.iterations);
        self.priv_utility_rhs = Some(package.utility_rhs);
        self
    }

    /// Two-column `name value` table.
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("rho_bar", format!("{:.10e}", self.rho_bar)),
            ("C1", format!("{:.10e}", self.c1)),
            ("C2", format!("{:.10e}", self.c2)),
            ("C3", format!("{:.10e}", self.c3)),
            ("C1 > 0", self.c1_positive.to_string()),
            ("C2 >= 0", self.c2_nonnegative.to_string()),
            ("C3 <= 1", self.c3_at_most_one.to_string()),
        ];
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.10e}"));
        for (name, v) in [
            ("T_min", opt(self.t_min)),
            ("utility_rhs", opt(self.utility_rhs)),
            ("C4", opt(self.c4)),
            ("priv_T", opt(self.priv_t)),
            ("priv_utility_rhs", opt(self.priv_utility_rhs)),
        ] {
            if let Some(v) = v {
                rows.push((name, v));
            }
        }
        rows.iter().map(|(n, v)| format!("{n:<18} {v}\n")).collect()
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be > 0, got {v}")))
    }
}

fn check_staleness(tau: f64) -> Result<()> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("staleness bound must be >= 0, got {tau}")))
    }
}

/// `C1`, `C2`, `C3` and `rho_bar` for learning rate `eta`, batch `B`,
/// smoothness `L`, staleness bound `tau`, `K` workers and spectral gap `rho`.
pub fn descent_constants(eta: f64, batch: f64, l: f64, tau: f64, workers: usize, rho: f64) -> Result<ConvergenceConstants> {
    check_positive("eta", eta)?;
    check_positive("B", batch)?;
    check_positive("L", l)?;
    check_staleness(tau)?;
    if workers < 2 {
        return Err(Error::Domain(format!("need at least 2 workers, got {workers}")));
    }
    let rho_bar = topology::rho_bar(workers, rho)?;
    let k = workers as f64;
    let ebl = eta * batch * l;
    let tau2 = tau * tau;
    let mix = tau * (k - 1.0) / k + rho_bar;

    let c1 = 1.0 - 24.0 * ebl * ebl * mix;
    let c3 = 0.5
        + ebl * tau2 / k
        + (6.0 * ebl * ebl + eta * k * batch * l + 12.0 * ebl * ebl * ebl * tau2 / k) * 2.0 * rho_bar / c1;
    let eb = eta * batch;
    let c2 = -(eb * l * l / k + 6.0 * eb * eb * l * l * l / (k * k) + 12.0 * eb * eb * eb * l.powi(4) * tau2 / (k * k * k))
        * 4.0
        * eb
        * eb
        * mix
        / c1
        + eb / (2.0 * k)
        - eb * eb * l / (k * k)
        - 2.0 * eb * eb * eb * l * l * tau2 / (k * k * k);
    Ok(ConvergenceConstants {
        rho_bar,
        c1,
        c2,
        c3,
        c1_positive: c1 > 0.0,
        c2_nonnegative: c2 >= 0.0,
        c3_at_most_one: c3 <= 1.0,
        t_min: None,
        utility_rhs: None,
        c4: None,
        priv_t: None,
        priv_utility_rhs: None,
    })
}

/// Problem constants entering the utility bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `F(w^0) - F*`.
    pub f0_gap: f64,
    pub lipschitz: f64,
    /// Within-worker gradient variance bound.
    pub grad_var: f64,
    /// Across-worker gradient dissimilarity bound.
    pub worker_var: f64,
    pub dim: usize,
    pub sigma2: f64,
    pub batch: usize,
}

impl BoundInputs {
    /// Reads `L`, the variance bounds and `F*` from the task.
    pub fn from_task(task: &Task, initial_loss: f64, sigma2: f64, batch: usize) -> Result<Self> {
        let f_star = task
            .optimal_value()
            .ok_or_else(|| Error::Domain(format!("{} task has no known optimal value", task.kind().as_str())))?;
        Ok(Self {
            f0_gap: initial_loss - f_star,
            lipschitz: task.lipschitz_grad(),
            grad_var: task.grad_var(),
            worker_var: task.worker_var(),
            dim: task.dim(),
            sigma2,
            batch,
        })
    }

    fn noise_term(&self) -> f64 {
        let b = self.batch as f64;
        self.grad_var / b + 6.0 * self.worker_var + self.dim as f64 * self.sigma2 / (b * b)
    }
}

/// The right-hand side of the averaged gradient-norm bound for a general
/// learning rate `eta`, `T` iterations and `K` workers.
pub fn descent_bound(inputs: &BoundInputs, eta: f64, iterations: usize, workers: usize) -> f64 {
    let (b, k, t) = (inputs.batch as f64, workers as f64, iterations as f64);
    2.0 * inputs.f0_gap * k / (eta * t * b)
        + 2.0 * eta * inputs.lipschitz / (b * k)
            * (inputs.grad_var * b + 6.0 * inputs.worker_var * b * b + inputs.dim as f64 * inputs.sigma2)
}

/// The four branches of the iteration threshold, before the `L^2 K^2` factor.
pub fn rate_threshold_branches(workers: usize, tau: f64, rho: f64) -> Result<[f64; 4]> {
    check_staleness(tau)?;
    if workers < 2 {
        return Err(Error::Domain(format!("need at least 2 workers, got {workers}")));
    }
    let rho_bar = topology::rho_bar(workers, rho)?;
    let k = workers as f64;
    let b1 = 192.0 * (tau * (k - 1.0) / k + rho_bar);
    let b2 = 1024.0 * k * k * rho_bar * rho_bar;
    let b3 = 64.0 * tau * tau / (k * k);
    let inner = 8.0 * 6f64.sqrt() * tau.cbrt().powi(2) + 8.0;
    let b4 = (k - 1.0).sqrt() / k.cbrt().sqrt() * inner * inner * (tau + rho_bar * k / (k - 1.0)).cbrt().powi(2);
    Ok([b1, b2, b3, b4])
}

/// Smallest `T` for which the `O(1/sqrt(T))` rate holds.
pub fn rate_threshold(l: f64, workers: usize, tau: f64, rho: f64) -> Result<f64> {
    check_positive("L", l)?;
    let k = workers as f64;
    let max = rate_threshold_branches(workers, tau, rho)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(l * l * k * k * max)
}

/// `(2(F(w^0) - F*) + 2L(var/B + 6 dissimilarity + d sigma^2/B^2)) / sqrt(T)`.
pub fn rate_bound(inputs: &BoundInputs, iterations: usize) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::Domain("T must be >= 1".into()));
    }
    Ok((2.0 * inputs.f0_gap + 2.0 * inputs.lipschitz * inputs.noise_term()) / (iterations as f64).sqrt())
}

/// Iteration count, constant and utility bound under calibrated noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyUtility {
    pub iterations: f64,
    pub c4: f64,
    pub utility_rhs: f64,
}

/// Budget inputs of the privacy-utility trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyInputs {
    pub mu: f64,
    pub workers: usize,
    pub n1: usize,
    pub eps: f64,
    pub delta: f64,
    pub clip_bound: f64,
}

/// `C4 = 4 sqrt(5) (1 + 1/(B^2 mu (1 - mu)))`.
pub fn c4(batch: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Domain(format!("mu must lie in (0, 1), got {mu}")));
    }
    check_positive("B", batch)?;
    Ok(4.0 * 5f64.sqrt() * (1.0 + 1.0 / (batch * batch * mu * (1.0 - mu))))
}

/// The iteration count that balances the noise term against the rate, and the
/// resulting utility bound. Ignores `inputs.sigma2`.
pub fn private_rate_package(inputs: &BoundInputs, privacy: &PrivacyInputs) -> Result<PrivacyUtility> {
    let PrivacyInputs { mu, workers, n1, eps, delta, clip_bound } = *privacy;
    let c4 = c4(inputs.batch as f64, mu)?;
    check_positive("eps", eps)?;
    check_positive("G", clip_bound)?;
    check_positive("L", inputs.lipschitz)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if workers == 0 || n1 == 0 || inputs.dim == 0 {
        return Err(Error::Domain("K, n_(1) and d must be positive".into()));
    }
    let b = inputs.batch as f64;
    let (k, n, d, l, g) = (workers as f64, n1 as f64, inputs.dim as f64, inputs.lipschitz, clip_bound);
    let log_delta = (1.0 / delta).ln();
    let gap = inputs.f0_gap + l * (inputs.grad_var / b + 6.0 * inputs.worker_var);
    let kn = k * n;
    let iterations = 2.0 * gap * kn * kn * eps * eps / (40.0 * d * l * g * g * log_delta);
    let utility_rhs = c4 * g * (d * l * gap * log_delta).sqrt() / (kn * eps);
    Ok(PrivacyUtility { iterations, c4, utility_rhs })
}

/// One probe of the average model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub global_iter: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
}

/// Measured mean against the rate bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundComparison {
    pub measured_mean: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Largest staleness measured in the trace, used as `tau`.
    pub tau: usize,
    pub t_min: f64,
    /// Whether the run was long enough for the threshold and used `eta = K/(B sqrt(T))`.
    pub in_regime: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub probes: Vec<ProbePoint>,
    /// Mean of `||grad F(theta^t)||^2` over the probes up to and including each one.
    pub running_mean: Vec<f64>,
    /// Mean over probes with `t < T`, the quantity the rate bounds control.
    pub mean_grad_norm_sq: f64,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub bound: Option<BoundComparison>,
}

/// What the bound comparison needs beyond the trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub inputs: BoundInputs,
    pub workers: usize,
    pub rho: f64,
}

fn build_report(
    probes: Vec<ProbePoint>,
    iterations: usize,
    learning_rate: f64,
    max_staleness: usize,
    check: Option<&RateCheck>,
) -> Result<ConvergenceReport> {
    let last = *probes.last().ok_or(Error::EmptyTrace)?;
    let mut running_mean = Vec::with_capacity(probes.len());
    let mut acc = 0.0;
    for (i, p) in probes.iter().enumerate() {
        acc += p.grad_norm_sq;
        running_mean.push(acc / (i + 1) as f64);
    }
    let before_end: Vec<f64> = probes
        .iter()
        .filter(|p| p.global_iter < iterations)
        .map(|p| p.grad_norm_sq)
        .collect();
    let mean_grad_norm_sq = if before_end.is_empty() {
        last.grad_norm_sq
    } else {
        before_end.iter().sum::<f64>() / before_end.len() as f64
    };
    let bound = match check {
        Some(c) => {
            let rhs = rate_bound(&c.inputs, iterations)?;
            let t_min = rate_threshold(c.inputs.lipschitz, c.workers, max_staleness as f64, c.rho)?;
            let rule = crate::engine::inverse_sqrt_learning_rate(c.workers, c.inputs.batch, iterations);
            let rule_matches = ((learning_rate - rule) / rule).abs() <= 1e-12;
            Some(BoundComparison {
                measured_mean: mean_grad_norm_sq,
                rhs,
                holds: mean_grad_norm_sq <= rhs,
                tau: max_staleness,
                t_min,
                in_regime: iterations as f64 >= t_min && rule_matches,
            })
        }
        None => None,
    };
    Ok(ConvergenceReport {
        probes,
        running_mean,
        mean_grad_norm_sq,
        final_loss: last.loss,
        final_grad_norm_sq: last.grad_norm_sq,
        bound,
    })
}

/// Re-evaluates `F` and `||grad F||^2` at the average model of every probe whose
/// iteration is a multiple of `stride`, plus the final probe.
pub fn convergence_report(
    trace: &TrainingTrace,
    task: &Task,
    stride: usize,
    check: Option<&RateCheck>,
) -> Result<ConvergenceReport> {
    if stride == 0 {
        return Err(Error::Domain("probe stride must be >= 1".into()));
    }
    let summary = trace
        .summary
        .as_ref()
        .ok_or_else(|| Error::Domain("trace has no run summary".into()))?;
    let last_iter = trace.probes.last().map(|p| p.global_iter);
    let mut probes = Vec::new();
    for state in &trace.probes {
        if state.global_iter % stride != 0 && Some(state.global_iter) != last_iter {
            continue;
        }
        probes.push(ProbePoint {
            global_iter: state.global_iter,
            loss: task.loss(&state.theta)?,
            grad_norm_sq: task.full_gradient(&state.theta)?.norm_sq(),
        });
    }
    build_report(probes, summary.iterations, summary.learning_rate, summary.max_staleness, check)
}

/// Collects probe metrics from a streamed run without keeping the models, for
/// runs too long to hold in memory.
#[derive(Debug, Default)]
pub struct ProbeCollector {
    probes: Vec<ProbePoint>,
    max_staleness: usize,
}

impl TraceSink for ProbeCollector {
    fn record(&mut self, record: TraceRecord) {
        if let Some(s) = record.staleness {
            self.max_staleness = self.max_staleness.max(s);
        }
        if record.event == EventKind::MetricProbe {
            if let (Some(loss), Some(grad_norm_sq)) = (record.loss, record.grad_norm_sq) {
                self.probes.push(ProbePoint { global_iter: record.global_iter, loss, grad_norm_sq });
            }
        }
    }
}

impl ProbeCollector {
    pub fn probes(&self) -> &[ProbePoint] {
        &self.probes
    }

    pub fn report(
        self,
        iterations: usize,
        learning_rate: f64,
        check: Option<&RateCheck>,
    ) -> Result<ConvergenceReport> {
        let tau = self.max_staleness;
        build_report(self.probes, iterations, learning_rate, tau, check)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn c1_worked_example() {
        let c = descent_constants(0.01, 1.0, 1.0, 2.0, 2, 0.0).unwrap();
        assert!((c.rho_bar - 0.5).abs() < 1e-15);
        assert!(rel(c.c1, 0.9964) < 1e-14);
        assert!(c.admissible());
    }

    #[test]
    fn small_eta_limits() {
        let c = descent_constants(1e-9, 1.0, 1.0, 2.0, 4, 0.3).unwrap();
        assert!((c.c1 - 1.0).abs() < 1e-15);
        assert!((c.c3 - 0.5).abs() < 1e-7);
        assert!(c.c2 > 0.0 && c.c2 < 1e-8);
    }

    #[test]
    fn large_eta_flips_c1() {
        let c = descent_constants(1.0, 1.0, 1.0, 2.0, 2, 0.0).unwrap();
        assert!(c.c1 < 0.0);
        assert!(!c.c1_positive);
    }

    #[test]
    fn rho_at_one_is_a_domain_error() {
        assert!(matches!(descent_constants(0.1, 1.0, 1.0, 0.0, 4, 1.0), Err(Error::Domain(_))));
        assert!(matches!(rate_threshold(1.0, 4, 0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn threshold_worked_example() {
        let b = rate_threshold_branches(2, 0.0, 0.0).unwrap();
        assert_eq!(b[0], 96.0);
        assert_eq!(b[1], 1024.0);
        assert_eq!(b[2], 0.0);
        assert!((b[3] - 64.0 / 2f64.powf(1.0 / 6.0)).abs() < 1e-12);
        assert_eq!(rate_threshold(1.0, 2, 0.0, 0.0).unwrap(), 4096.0);
    }

    #[test]
    fn noise_free_bound_collapses() {
        let inputs = BoundInputs {
            f0_gap: 3.0,
            lipschitz: 1.0,
            grad_var: 0.0,
            worker_var: 0.0,
            dim: 5,
            sigma2: 0.0,
            batch: 4,
        };
        assert_eq!(rate_bound(&inputs, 100).unwrap(), 0.6);
        assert!(rel(rate_bound(&inputs, 400).unwrap(), 0.3) < 1e-15);
    }

    #[test]
    fn c4_values() {
        assert!(rel(c4(1.0, 0.5).unwrap(), 20.0 * 5f64.sqrt()) < 1e-15);
        assert!(rel(c4(1e6, 0.5).unwrap(), 4.0 * 5f64.sqrt()) < 1e-11);
        assert!(c4(1.0, 1.0).is_err());
    }
}
