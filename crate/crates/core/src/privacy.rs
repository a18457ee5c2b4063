//! Rényi-DP accountant for the noisy-gradient mechanism.
//!
//! The per-iteration mechanism is a Gaussian mechanism on the clipped mean
//! gradient (sensitivity `2G/B`) applied to a batch sampled without
//! replacement at rate `gamma <= B/(K n_(1))`. Its RDP cost at order `alpha` is
//! `5 gamma^2 alpha Delta^2 / sigma^2`, which composes additively over `T`
//! iterations and converts to `(eps, delta)`-DP at the end.
//!
//! Noise calibration fixes `alpha = log(1/delta)/((1-mu) eps) + 1` and
//! `sigma^2 = 20 G^2 T alpha / (K^2 n_(1)^2 mu eps)`; the result is only valid
//! when three feasibility inequalities hold, which [`calibrate_sigma`] checks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::vector::ModelVector;

/// Relative tolerance for equality assertions in accountant arithmetic.
pub const REL_TOL: f64 = 1e-12;

/// A point `(alpha, eps)` on an RDP curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpPoint {
    pub alpha: f64,
    pub eps_rdp: f64,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Domain(msg()))
    }
}

/// Gaussian mechanism with sensitivity `delta2`: `(alpha, alpha delta2^2 / (2 sigma^2))`-RDP.
pub fn gaussian_rdp(alpha: f64, delta2: f64, sigma2: f64) -> Result<RdpPoint> {
    ensure(alpha > 1.0, || format!("alpha must be > 1, got {alpha}"))?;
    ensure(delta2 > 0.0, || format!("sensitivity must be > 0, got {delta2}"))?;
    ensure(sigma2 > 0.0, || format!("sigma^2 must be > 0, got {sigma2}"))?;
    Ok(RdpPoint {
        alpha,
        eps_rdp: alpha * delta2 * delta2 / (2.0 * sigma2),
    })
}

/// Gaussian mechanism on a without-replacement subsample at rate `gamma`:
/// `(alpha, 5 gamma^2 alpha delta2^2 / sigma^2)`-RDP, valid only when
/// `sigma^2/delta2^2 >= 1.5` and `alpha <= log(1/(gamma (1 + sigma^2/delta2^2)))`.
/// Queries outside that regime fail rather than returning an unproven bound.
pub fn subsampled_gaussian_rdp(alpha: f64, gamma: f64, delta2: f64, sigma2: f64) -> Result<RdpPoint> {
    ensure(alpha > 1.0, || format!("alpha must be > 1, got {alpha}"))?;
    ensure(gamma > 0.0 && gamma <= 1.0, || format!("gamma must lie in (0, 1], got {gamma}"))?;
    ensure(delta2 > 0.0, || format!("sensitivity must be > 0, got {delta2}"))?;
    ensure(sigma2 > 0.0, || format!("sigma^2 must be > 0, got {sigma2}"))?;
    let ratio = sigma2 / (delta2 * delta2);
    if ratio < 1.5 {
        return Err(Error::OutOfRegime {
            inequality: "sigma^2/Delta^2 >= 1.5",
            lhs: ratio,
            rhs: 1.5,
        });
    }
    let alpha_max = (1.0 / (gamma * (1.0 + ratio))).ln();
    if alpha > alpha_max {
        return Err(Error::OutOfRegime {
            inequality: "alpha <= log(1/(gamma (1 + sigma^2/Delta^2)))",
            lhs: alpha,
            rhs: alpha_max,
        });
    }
    Ok(RdpPoint {
        alpha,
        eps_rdp: 5.0 * gamma * gamma * alpha * delta2 * delta2 / sigma2,
    })
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sequential composition at a fixed order. An empty list composes to zero
/// cost; its order is reported as `+inf`.
pub fn compose(points: &[RdpPoint]) -> Result<RdpPoint> {
    let Some(first) = points.first() else {
        return Ok(RdpPoint { alpha: f64::INFINITY, eps_rdp: 0.0 });
    };
    if let Some(p) = points.iter().find(|p| p.alpha != first.alpha) {
        return Err(Error::Composition(format!(
            "cannot compose RDP costs at different orders ({} and {})",
            first.alpha, p.alpha
        )));
    }
    Ok(RdpPoint {
        alpha: first.alpha,
        eps_rdp: compensated_sum(points.iter().map(|p| p.eps_rdp)),
    })
}

/// `(alpha, eps)`-RDP implies `(eps + log(1/delta)/(alpha - 1), delta)`-DP.
pub fn rdp_to_dp(point: RdpPoint, delta: f64) -> Result<f64> {
    ensure(point.alpha > 1.0, || format!("alpha must be > 1, got {}", point.alpha))?;
    ensure(delta > 0.0 && delta <= 1.0, || format!("delta must lie in (0, 1], got {delta}"))?;
    if point.alpha.is_infinite() {
        return Ok(point.eps_rdp);
    }
    Ok(point.eps_rdp + (1.0 / delta).ln() / (point.alpha - 1.0))
}

/// One of the three calibration feasibility inequalities, `lhs <op> rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeasibilityCheck {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub const NOISE_FLOOR: &str = "sigma^2/Delta^2 >= 1.5";
pub const ALPHA_BOUND: &str = "alpha <= log(K^3 n^3 mu eps / (K^2 n^2 mu eps B + 5 T alpha B^3))";
pub const EPS_BOUND: &str = "eps <= 10 B^2 T alpha / (3 K^2 n^2 mu)";

/// Inputs to noise calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRequest {
    pub eps: f64,
    pub delta: f64,
    pub workers: usize,
    /// Smallest shard size `n_(1)`.
    pub n1: usize,
    pub batch: usize,
    pub iterations: usize,
    pub clip_bound: f64,
}

impl BudgetRequest {
    fn validate(&self) -> Result<()> {
        ensure(self.eps > 0.0 && self.eps.is_finite(), || format!("eps must be > 0, got {}", self.eps))?;
        ensure(self.delta > 0.0 && self.delta < 1.0, || {
            format!("delta must lie in (0, 1), got {}", self.delta)
        })?;
        ensure(self.workers >= 1, || "K must be positive".into())?;
        ensure(self.n1 >= 1, || "n_(1) must be positive".into())?;
        ensure(self.batch >= 1, || "B must be positive".into())?;
        ensure(self.iterations >= 1, || "T must be positive".into())?;
        ensure(self.clip_bound > 0.0, || format!("G must be > 0, got {}", self.clip_bound))?;
        ensure(self.batch <= self.workers * self.n1, || {
            format!("B = {} exceeds K n_(1) = {}", self.batch, self.workers * self.n1)
        })
    }
}

/// The calibrated bundle tying noise, order, sampling rate and budget together.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrivacyParams {
    pub eps: f64,
    pub delta: f64,
    pub mu: f64,
    pub alpha: f64,
    pub sigma2: f64,
    /// Worst-case subsample rate `B / (K n_(1))`.
    pub gamma: f64,
    /// Sensitivity of the clipped mean gradient, `2G/B`.
    pub delta2: f64,
    pub clip_bound: f64,
    pub batch: usize,
    pub iterations: usize,
    pub workers: usize,
    pub n1: usize,
    pub checks: [FeasibilityCheck; 3],
}

impl PrivacyParams {
    pub fn is_feasible(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    /// `sigma^2 >= 6 G^2 / B^2`, the noise floor written without the sensitivity.
    pub fn meets_noise_floor_direct(&self) -> bool {
        let b = self.batch as f64;
        self.sigma2 >= 6.0 * self.clip_bound * self.clip_bound / (b * b)
    }

    /// Per-iteration RDP cost at the calibrated order.
    pub fn step_cost(&self) -> Result<RdpPoint> {
        subsampled_gaussian_rdp(self.alpha, self.gamma, self.delta2, self.sigma2)
    }

    /// Full accountant chain: `T`-fold composition of the subsampled Gaussian
    /// cost followed by conversion to `(eps', delta)`-DP.
    pub fn accounted_epsilon(&self) -> Result<f64> {
        let step = self.step_cost()?;
        let total = compose(&vec![step; self.iterations])?;
        rdp_to_dp(total, self.delta)
    }
}

/// Calibrated quantities and the three feasibility checks, whether or not they hold.
pub fn evaluate_calibration(req: &BudgetRequest, mu: f64) -> Result<PrivacyParams> {
    req.validate()?;
    ensure(mu > 0.0 && mu < 1.0, || format!("mu must lie in (0, 1), got {mu}"))?;
    let BudgetRequest { eps, delta, workers, n1, batch, iterations, clip_bound } = *req;
    let (k, n, b, t, g) = (workers as f64, n1 as f64, batch as f64, iterations as f64, clip_bound);

    let alpha = (1.0 / delta).ln() / ((1.0 - mu) * eps) + 1.0;
    let kn = k * n;
    let sigma2 = 20.0 * g * g * t * alpha / (kn * kn * mu * eps);
    let delta2 = 2.0 * g / b;
    let gamma = b / kn;

    let floor = sigma2 / (delta2 * delta2);
    let alpha_rhs = (kn * kn * kn * mu * eps / (kn * kn * mu * eps * b + 5.0 * t * alpha * b * b * b)).ln();
    let eps_rhs = 10.0 * b * b * t * alpha / (3.0 * kn * kn * mu);
    let checks = [
        FeasibilityCheck { name: NOISE_FLOOR, lhs: floor, rhs: 1.5, holds: floor >= 1.5 },
        FeasibilityCheck { name: ALPHA_BOUND, lhs: alpha, rhs: alpha_rhs, holds: alpha <= alpha_rhs },
        FeasibilityCheck { name: EPS_BOUND, lhs: eps, rhs: eps_rhs, holds: eps <= eps_rhs },
    ];
    Ok(PrivacyParams {
        eps,
        delta,
        mu,
        alpha,
        sigma2,
        gamma,
        delta2,
        clip_bound,
        batch,
        iterations,
        workers,
        n1,
        checks,
    })
}

/// Calibrates `sigma^2` for the budget and returns the bundle only when all
/// three feasibility inequalities hold.
pub fn calibrate_sigma(req: &BudgetRequest, mu: f64) -> Result<PrivacyParams> {
    let params = evaluate_calibration(req, mu)?;
    if let Some(c) = params.checks.iter().find(|c| !c.holds) {
        return Err(Error::InfeasibleBudget { constraint: c.name, lhs: c.lhs, rhs: c.rhs });
    }
    Ok(params)
}

/// Outcome of a grid search over `mu`.
#[derive(Debug, Clone, PartialEq)]
pub enum MuSearch {
    Feasible(PrivacyParams),
    /// No grid point was feasible. `closest` is the point with the smallest
    /// worst relative violation, with its failing checks.
    Infeasible { closest: PrivacyParams, failed: Vec<FeasibilityCheck> },
}

pub const DEFAULT_MU_GRID: usize = 99;

/// Scans `mu = i/(grid+1)`, `i = 1..=grid`, and keeps the feasible bundle with
/// the smallest `sigma^2`.
pub fn find_mu(req: &BudgetRequest, grid: usize) -> Result<MuSearch> {
    ensure(grid >= 10, || format!("mu grid needs at least 10 points, got {grid}"))?;
    let mut best: Option<PrivacyParams> = None;
    let mut closest: Option<(f64, PrivacyParams)> = None;
    for i in 1..=grid {
        let mu = i as f64 / (grid + 1) as f64;
        let p = evaluate_calibration(req, mu)?;
        if p.is_feasible() {
            if best.as_ref().is_none_or(|b| p.sigma2 < b.sigma2) {
                best = Some(p);
            }
        } else {
            let violation = p
                .checks
                .iter()
                .map(|c| match c.name {
                    EPS_BOUND | ALPHA_BOUND => (c.lhs - c.rhs) / c.rhs.abs().max(f64::MIN_POSITIVE),
                    _ => (c.rhs - c.lhs) / c.rhs,
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if closest.as_ref().is_none_or(|(v, _)| violation < *v) {
                closest = Some((violation, p));
            }
        }
    }
    Ok(match best {
        Some(p) => MuSearch::Feasible(p),
        None => {
            let (_, p) = closest.expect("grid is nonempty");
            let failed = p.checks.iter().filter(|c| !c.holds).copied().collect();
            MuSearch::Infeasible { closest: p, failed }
        }
    })
}

/// Budget spent by the `t`-th intermediate model: `sqrt(t/T) eps`.
pub fn per_iteration_epsilon(t: usize, params: &PrivacyParams) -> Result<f64> {
    if t > params.iterations {
        return Err(Error::Domain(format!(
            "iteration {t} exceeds the calibrated horizon T = {}",
            params.iterations
        )));
    }
    Ok((t as f64 / params.iterations as f64).sqrt() * params.eps)
}

/// `g + n` with `n ~ N(0, sigma2 I)`.
pub fn add_noise(g: &ModelVector, sigma2: f64, rng: &mut SeededRng) -> Result<ModelVector> {
    ensure(sigma2 >= 0.0 && sigma2.is_finite(), || {
        format!("noise variance must be >= 0, got {sigma2}")
    })?;
    if sigma2 == 0.0 {
        return Ok(g.clone());
    }
    let sd = sigma2.sqrt();
    Ok(g.as_slice()
        .iter()
        .map(|x| x + sd * rng.sample::<f64, _>(StandardNormal))
        .collect::<Vec<_>>()
        .into())
}

/// Per-iteration record of RDP spending for a homogeneous mechanism.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpendLedger {
    entries: Vec<(usize, f64)>,
    total: f64,
    comp: f64,
}

impl SpendLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, t: usize, eps_rdp: f64) {
        self.entries.push((t, eps_rdp));
        let s = self.total + eps_rdp;
        if self.total.abs() >= eps_rdp.abs() {
            self.comp += (self.total - s) + eps_rdp;
        } else {
            self.comp += (eps_rdp - s) + self.total;
        }
        self.total = s;
    }

    pub fn total(&self) -> f64 {
        self.total + self.comp
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }
}
