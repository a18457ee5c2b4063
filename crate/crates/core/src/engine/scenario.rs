//! Heterogeneity scenarios: how long each gradient computation takes.
//!
//! Compute time of one minibatch is `base * multiplier * (1 + jitter)` with
//! jitter uniform in `[0, j]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioKind {
    None,
    /// Each iteration one uniformly chosen worker runs `factor` times slower.
    RandomSlow { factor: f64 },
    /// One worker is always `factor` times slower.
    FixedStraggler { worker: usize, factor: f64 },
    /// Batch size and learning rate are scaled when the run is constructed.
    LargeBatch { batch_mult: f64, lr_mult: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub base_compute_time: f64,
    /// Duration of one pairwise gossip exchange.
    pub comm_time: f64,
    /// Duration of the synchronous allreduce barrier.
    pub allreduce_time: f64,
    /// Upper end of the uniform relative jitter; 0 gives exact timings.
    pub jitter: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::new(ScenarioKind::None)
    }
}

impl Scenario {
    /// Unit compute time, no gossip delay, allreduce at `0.1 x` compute, no jitter.
    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            base_compute_time: 1.0,
            comm_time: 0.0,
            allreduce_time: 0.1,
            jitter: 0.0,
        }
    }

    pub fn validate(&self, workers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.kind {
            ScenarioKind::None => {}
            ScenarioKind::RandomSlow { factor } if !(factor >= 1.0) => {
                return bad(format!("slowdown factor must be >= 1, got {factor}"))
            }
            ScenarioKind::FixedStraggler { worker, factor } => {
                if !(factor >= 1.0) {
                    return bad(format!("slowdown factor must be >= 1, got {factor}"));
                }
                if worker >= workers {
                    return bad(format!("straggler {worker} out of range for {workers} workers"));
                }
            }
            ScenarioKind::LargeBatch { batch_mult, lr_mult } if !(batch_mult > 0.0 && lr_mult > 0.0) => {
                return bad(format!("large-batch multipliers must be > 0 (got {batch_mult}, {lr_mult})"))
            }
            _ => {}
        }
        if !(self.base_compute_time > 0.0) {
            return bad(format!("base compute time must be > 0, got {}", self.base_compute_time));
        }
        if !(self.comm_time >= 0.0) || !(self.allreduce_time >= 0.0) || !(self.jitter >= 0.0) {
            return bad("communication times and jitter must be >= 0".into());
        }
        Ok(())
    }

    /// Batch size and learning rate after the large-batch scaling.
    pub fn scale_hyperparameters(&self, batch: usize, learning_rate: f64) -> (usize, f64) {
        match self.kind {
            ScenarioKind::LargeBatch { batch_mult, lr_mult } => {
                (((batch as f64) * batch_mult).round().max(1.0) as usize, learning_rate * lr_mult)
            }
            _ => (batch, learning_rate),
        }
    }

    /// The worker slowed down in `iteration` under `random_slow`.
    pub fn slow_worker(seed: u64, iteration: usize, workers: usize) -> usize {
        rng::stream(seed, "scenario", iteration as u64).random_range(0..workers)
    }

    /// Compute-time multiplier for `worker` at `iteration`.
    pub fn multiplier(&self, worker: usize, iteration: usize, workers: usize, seed: u64) -> f64 {
        match self.kind {
            ScenarioKind::None | ScenarioKind::LargeBatch { .. } => 1.0,
            ScenarioKind::RandomSlow { factor } => {
                if Self::slow_worker(seed, iteration, workers) == worker {
                    factor
                } else {
                    1.0
                }
            }
            ScenarioKind::FixedStraggler { worker: slow, factor } => {
                if slow == worker {
                    factor
                } else {
                    1.0
                }
            }
        }
    }

    /// Long-run update rate of the asynchronous system: every worker is a
    /// renewal process with cycle `base * multiplier + comm_time`.
    pub fn renewal_rate(&self, workers: usize) -> f64 {
        let cycle = |m: f64| self.base_compute_time * m + self.comm_time;
        match self.kind {
            ScenarioKind::FixedStraggler { factor, .. } => {
                (workers - 1) as f64 / cycle(1.0) + 1.0 / cycle(factor)
            }
            ScenarioKind::RandomSlow { factor } => {
                let k = workers as f64;
                k / cycle(((k - 1.0) + factor) / k)
            }
            _ => workers as f64 / cycle(1.0),
        }
    }
}
