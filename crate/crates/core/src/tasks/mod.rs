//! Desk-scale objectives `F = sum_k p_k F_k` with per-worker data shards and the
//! clipped stochastic-gradient oracle consumed by the simulator.
//!
//! Three task kinds are provided:
//!
//! * `quadratic`: `f(w; b) = (c/2)||w - b||^2`. Everything is known in closed form:
//!   `w* = sum_k p_k mean(b in shard k)`, `F*`, `L = c`, and the variance bounds.
//! * `logistic`: binary logistic regression, labels in {-1, +1}.
//! * `mlp`: one hidden layer of 8 tanh units, scalar output, squared loss (non-convex).

mod logistic;
mod mlp;
mod quadratic;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use mlp::{param_dim as mlp_param_dim, HIDDEN as MLP_HIDDEN};

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::vector::ModelVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    Logistic,
    Mlp,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Quadratic => "quadratic",
            TaskKind::Logistic => "logistic",
            TaskKind::Mlp => "mlp",
        }
    }
}

/// One data point. Quadratic tasks only use `features` (the center `b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    pub worker_id: usize,
    pub samples: Vec<Sample>,
}

impl DataShard {
    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

/// Shard sizes: one value for every worker, or one per worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShardSizes {
    Uniform(usize),
    PerWorker(Vec<usize>),
}

/// Whether the variance and smoothness constants are exact or plug-in estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatSource {
    Exact,
    Sampled,
}

fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}
fn default_stat_draws() -> usize {
    10_000
}

/// Generator description for a task, as embedded in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Feature dimension. Equals the model dimension except for `mlp`.
    pub dim: usize,
    pub workers: usize,
    pub shard_sizes: ShardSizes,
    /// Seed of the data generator (independent of the run seed).
    #[serde(default)]
    pub data_seed: u64,
    pub clip_bound: f64,
    #[serde(default = "default_true")]
    pub clipping: bool,
    /// Quadratic only: `f(w; b) = (curvature/2)||w - b||^2`.
    #[serde(default = "default_one")]
    pub curvature: f64,
    /// Standard deviation of the per-worker shift of the data distribution.
    #[serde(default = "default_one")]
    pub between_spread: f64,
    /// Standard deviation of samples around their worker's shift.
    #[serde(default = "default_one")]
    pub within_spread: f64,
    /// Mixture weights `p_k`; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Per-sample gradient evaluations spent on plug-in estimates of the
    /// variance constants for logistic and mlp tasks.
    #[serde(default = "default_stat_draws")]
    pub stat_draws: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, dim: usize, workers: usize, shard_size: usize) -> Self {
        Self {
            kind,
            dim,
            workers,
            shard_sizes: ShardSizes::Uniform(shard_size),
            data_seed: 0,
            clip_bound: 1.0,
            clipping: true,
            curvature: 1.0,
            between_spread: 1.0,
            within_spread: 1.0,
            weights: None,
            stat_draws: default_stat_draws(),
        }
    }

    pub fn shard_size_list(&self) -> Vec<usize> {
        match &self.shard_sizes {
            ShardSizes::Uniform(n) => vec![*n; self.workers],
            ShardSizes::PerWorker(v) => v.clone(),
        }
    }

    /// Model dimension `d`.
    pub fn model_dim(&self) -> usize {
        match self.kind {
            TaskKind::Quadratic | TaskKind::Logistic => self.dim,
            TaskKind::Mlp => mlp::param_dim(self.dim),
        }
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.dim == 0 {
            errs.push("task.dim must be >= 1".to_string());
        }
        if self.workers < 2 {
            errs.push(format!("task.workers must be >= 2 (got {})", self.workers));
        }
        match &self.shard_sizes {
            ShardSizes::Uniform(0) => errs.push("task.shard_sizes must be positive".into()),
            ShardSizes::Uniform(_) => {}
            ShardSizes::PerWorker(v) => {
                if v.len() != self.workers {
                    errs.push(format!(
                        "task.shard_sizes has {} entries but task.workers = {}",
                        v.len(),
                        self.workers
                    ));
                }
                if v.contains(&0) {
                    errs.push("task.shard_sizes entries must be positive".into());
                }
            }
        }
        if !(self.clip_bound > 0.0) {
            errs.push(format!("task.clip_bound must be > 0 (got {})", self.clip_bound));
        }
        if !(self.curvature > 0.0 && self.curvature.is_finite()) {
            errs.push(format!("task.curvature must be > 0 (got {})", self.curvature));
        }
        if !(self.between_spread >= 0.0) || !(self.within_spread >= 0.0) {
            errs.push("task spreads must be >= 0".into());
        }
        if let Some(w) = &self.weights {
            if w.len() != self.workers {
                errs.push(format!(
                    "task.weights has {} entries but task.workers = {}",
                    w.len(),
                    self.workers
                ));
            }
            if w.iter().any(|&p| !(p >= 0.0)) {
                errs.push("task.weights must be nonnegative".into());
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                errs.push(format!("task.weights must sum to 1 +- 1e-12 (sum = {total})"));
            }
        }
        if self.kind != TaskKind::Quadratic && self.stat_draws == 0 {
            errs.push("task.stat_draws must be positive".into());
        }
        errs
    }

    pub fn build(&self) -> Result<Task> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        Task::generate(self)
    }
}

/// An objective with its data shards and known constants.
#[derive(Debug, Clone)]
pub struct Task {
    kind: TaskKind,
    dim: usize,
    input_dim: usize,
    shards: Vec<DataShard>,
    weights: Vec<f64>,
    clip_bound: f64,
    clipping: bool,
    curvature: f64,
    lipschitz_grad: f64,
    grad_var: f64,
    worker_var: f64,
    stat_source: StatSource,
    optimal_value: Option<f64>,
    optimum: Option<ModelVector>,
}

impl Task {
    fn generate(spec: &TaskSpec) -> Result<Self> {
        let sizes = spec.shard_size_list();
        let m = spec.dim;
        let mut data_rng = rng::stream(spec.data_seed, "task-data", 0);
        let normal = |r: &mut SeededRng| -> f64 { r.sample(StandardNormal) };

        let teacher: Vec<f64> = match spec.kind {
            TaskKind::Quadratic => Vec::new(),
            TaskKind::Logistic => (0..m).map(|_| normal(&mut data_rng)).collect(),
            TaskKind::Mlp => (0..mlp::param_dim(m))
                .map(|_| normal(&mut data_rng) / (m as f64).sqrt())
                .collect(),
        };

        let mut shards = Vec::with_capacity(sizes.len());
        for (k, &n) in sizes.iter().enumerate() {
            let shift: Vec<f64> = (0..m)
                .map(|_| spec.between_spread * normal(&mut data_rng))
                .collect();
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let features: Vec<f64> = shift
                    .iter()
                    .map(|s| s + spec.within_spread * normal(&mut data_rng))
                    .collect();
                let target = match spec.kind {
                    TaskKind::Quadratic => 0.0,
                    TaskKind::Logistic => {
                        let p = logistic::label_probability(&teacher, &features);
                        if data_rng.random::<f64>() < p {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    TaskKind::Mlp => {
                        mlp::predict(&teacher, &features) + 0.1 * normal(&mut data_rng)
                    }
                };
                samples.push(Sample { features, target });
            }
            shards.push(DataShard { worker_id: k, samples });
        }

        let weights = spec
            .weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / spec.workers as f64; spec.workers]);
        Task::from_shards(
            spec.kind,
            m,
            shards,
            weights,
            spec.clip_bound,
            spec.clipping,
            spec.curvature,
            spec.stat_draws,
            spec.data_seed,
        )
    }

    /// Builds a task around explicit shards. Constants are derived from the data:
    /// exactly for quadratic tasks, by plug-in estimation otherwise.
    #[allow(clippy::too_many_arguments)]
    pub fn from_shards(
        kind: TaskKind,
        input_dim: usize,
        shards: Vec<DataShard>,
        weights: Vec<f64>,
        clip_bound: f64,
        clipping: bool,
        curvature: f64,
        stat_draws: usize,
        stat_seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        if shards.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 shards, got {}",
                shards.len()
            )));
        }
        if weights.len() != shards.len() {
            return Err(Error::Config("one weight per shard is required".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 || weights.iter().any(|&p| p < 0.0)
        {
            return Err(Error::Config("weights must be a distribution".into()));
        }
        for (k, s) in shards.iter().enumerate() {
            if s.samples.is_empty() {
                return Err(Error::Config(format!("shard {k} is empty")));
            }
            if s.samples.iter().any(|x| x.features.len() != input_dim) {
                return Err(Error::Shape(format!("shard {k} has a sample of wrong dimension")));
            }
        }
        let dim = match kind {
            TaskKind::Quadratic | TaskKind::Logistic => input_dim,
            TaskKind::Mlp => mlp::param_dim(input_dim),
        };
        let mut task = Task {
            kind,
            dim,
            input_dim,
            shards,
            weights,
            clip_bound,
            clipping,
            curvature,
            lipschitz_grad: curvature,
            grad_var: 0.0,
            worker_var: 0.0,
            stat_source: StatSource::Exact,
            optimal_value: None,
            optimum: None,
        };
        match kind {
            TaskKind::Quadratic => task.quadratic_constants(),
            TaskKind::Logistic => {
                task.lipschitz_grad = task
                    .all_samples()
                    .map(|s| logistic::smoothness(&s.features))
                    .fold(0.0, f64::max);
                task.sampled_variances(stat_draws, stat_seed);
            }
            TaskKind::Mlp => {
                task.sampled_variances(stat_draws, stat_seed);
                task.lipschitz_grad = task.sampled_smoothness(stat_seed);
            }
        }
        Ok(task)
    }

    fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.shards.iter().flat_map(|s| s.samples.iter())
    }

    fn shard_centroid(&self, k: usize) -> ModelVector {
        let shard = &self.shards[k];
        let mut c = ModelVector::zeros(self.input_dim);
        for s in &shard.samples {
            c.axpy(1.0, &ModelVector::from_vec(s.features.clone()));
        }
        c.scale(1.0 / shard.size() as f64);
        c
    }

    fn quadratic_constants(&mut self) {
        let c = self.curvature;
        let centroids: Vec<ModelVector> = (0..self.shards.len()).map(|k| self.shard_centroid(k)).collect();
        let mut optimum = ModelVector::zeros(self.dim);
        for (p, m) in self.weights.iter().zip(&centroids) {
            optimum.axpy(*p, m);
        }
        // sigma^2: worst within-shard variance of c(w - b) around c(w - mean_k).
        self.grad_var = self
            .shards
            .iter()
            .zip(&centroids)
            .map(|(shard, m)| {
                shard
                    .samples
                    .iter()
                    .map(|s| c * c * ModelVector::from_vec(s.features.clone()).sub(m).norm_sq())
                    .sum::<f64>()
                    / shard.size() as f64
            })
            .fold(0.0, f64::max);
        self.worker_var = self
            .weights
            .iter()
            .zip(&centroids)
            .map(|(p, m)| p * c * c * m.sub(&optimum).norm_sq())
            .sum();
        self.optimal_value = Some(self.direct_loss(&optimum));
        self.optimum = Some(optimum);
        self.lipschitz_grad = c;
        self.stat_source = StatSource::Exact;
    }

    /// Plug-in estimates of sup_w of the within- and across-worker gradient
    /// variances, evaluated at Gaussian random points.
    fn sampled_variances(&mut self, draws: usize, seed: u64) {
        let total: usize = self.shards.iter().map(DataShard::size).sum();
        let points = draws.div_ceil(total).max(1);
        let mut r = rng::stream(seed, "task-stats", 0);
        let (mut grad_var, mut worker_var) = (0.0_f64, 0.0_f64);
        for _ in 0..points {
            let w = self.random_point(&mut r);
            let shard_grads: Vec<Vec<ModelVector>> = (0..self.shards.len())
                .map(|k| {
                    self.shards[k]
                        .samples
                        .iter()
                        .map(|s| self.sample_gradient(&w, s))
                        .collect()
                })
                .collect();
            let means: Vec<ModelVector> = shard_grads
                .iter()
                .map(|g| ModelVector::mean(g).expect("shards are nonempty"))
                .collect();
            let mut full = ModelVector::zeros(self.dim);
            for (p, m) in self.weights.iter().zip(&means) {
                full.axpy(*p, m);
            }
            for (grads, mean) in shard_grads.iter().zip(&means) {
                let v = grads.iter().map(|g| g.sub(mean).norm_sq()).sum::<f64>() / grads.len() as f64;
                grad_var = grad_var.max(v);
            }
            let u: f64 = self
                .weights
                .iter()
                .zip(&means)
                .map(|(p, m)| p * m.sub(&full).norm_sq())
                .sum();
            worker_var = worker_var.max(u);
        }
        self.grad_var = grad_var;
        self.worker_var = worker_var;
        self.stat_source = StatSource::Sampled;
    }

    /// Largest observed gradient-difference quotient over nearby random pairs.
    fn sampled_smoothness(&self, seed: u64) -> f64 {
        let mut r = rng::stream(seed, "task-smoothness", 0);
        let mut best = 0.0_f64;
        for _ in 0..200 {
            let w = self.random_point(&mut r);
            let mut dir = self.random_point(&mut r);
            dir.scale(1e-3 / dir.norm().max(f64::MIN_POSITIVE));
            let k = r.random_range(0..self.shards.len());
            let i = r.random_range(0..self.shards[k].size());
            let s = &self.shards[k].samples[i];
            let g0 = self.sample_gradient(&w, s);
            let g1 = self.sample_gradient(&w.add(&dir), s);
            best = best.max(g1.sub(&g0).norm() / dir.norm());
        }
        best
    }

    fn random_point(&self, r: &mut SeededRng) -> ModelVector {
        (0..self.dim)
            .map(|_| r.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>()
            .into()
    }

    fn sample_gradient(&self, w: &ModelVector, s: &Sample) -> ModelVector {
        match self.kind {
            TaskKind::Quadratic => quadratic::gradient(self.curvature, w, &s.features),
            TaskKind::Logistic => logistic::gradient(w, &s.features, s.target),
            TaskKind::Mlp => mlp::gradient(w, &s.features, s.target),
        }
    }

    fn sample_loss_of(&self, w: &ModelVector, s: &Sample) -> f64 {
        match self.kind {
            TaskKind::Quadratic => quadratic::loss(self.curvature, w, &s.features),
            TaskKind::Logistic => logistic::loss(w, &s.features, s.target),
            TaskKind::Mlp => mlp::loss(w, &s.features, s.target),
        }
    }

    fn check_point(&self, w: &ModelVector) -> Result<()> {
        if w.dim() != self.dim {
            return Err(Error::Shape(format!(
                "model has dimension {}, task expects {}",
                w.dim(),
                self.dim
            )));
        }
        if !w.is_finite() {
            return Err(Error::Domain("model has non-finite coordinates".into()));
        }
        Ok(())
    }

    fn sample_ref(&self, worker: usize, sample: usize) -> Result<&Sample> {
        self.shards
            .get(worker)
            .ok_or_else(|| Error::Domain(format!("worker {worker} out of range")))?
            .samples
            .get(sample)
            .ok_or_else(|| Error::Domain(format!("sample {sample} out of range for worker {worker}")))
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    /// Model dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn workers(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[DataShard] {
        &self.shards
    }

    pub fn shard(&self, worker: usize) -> &DataShard {
        &self.shards[worker]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Size of the smallest shard, `n_(1)`.
    pub fn min_shard_size(&self) -> usize {
        self.shards.iter().map(DataShard::size).min().unwrap_or(0)
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn clipping(&self) -> bool {
        self.clipping
    }

    /// Smoothness constant `L`.
    pub fn lipschitz_grad(&self) -> f64 {
        self.lipschitz_grad
    }

    /// Within-worker gradient variance bound.
    pub fn grad_var(&self) -> f64 {
        self.grad_var
    }

    /// Across-worker gradient variance bound.
    pub fn worker_var(&self) -> f64 {
        self.worker_var
    }

    pub fn stat_source(&self) -> StatSource {
        self.stat_source
    }

    pub fn optimal_value(&self) -> Option<f64> {
        self.optimal_value
    }

    pub fn optimum(&self) -> Option<&ModelVector> {
        self.optimum.as_ref()
    }

    /// Default starting point: the origin for convex tasks, a small
    /// seeded random point for the network (breaks hidden-unit symmetry).
    pub fn default_init(&self, seed: u64) -> ModelVector {
        match self.kind {
            TaskKind::Quadratic | TaskKind::Logistic => ModelVector::zeros(self.dim),
            TaskKind::Mlp => {
                let mut r = rng::stream(seed, "init", 0);
                let mut w = self.random_point(&mut r);
                w.scale(0.1);
                w
            }
        }
    }

    /// Loss of a single sample, `f(w; xi)`.
    pub fn sample_loss(&self, w: &ModelVector, worker: usize, sample: usize) -> Result<f64> {
        self.check_point(w)?;
        Ok(self.sample_loss_of(w, self.sample_ref(worker, sample)?))
    }

    /// Unclipped `grad f(w; xi)` for one sample of one worker.
    pub fn per_sample_gradient(&self, w: &ModelVector, worker: usize, sample: usize) -> Result<ModelVector> {
        self.check_point(w)?;
        Ok(self.sample_gradient(w, self.sample_ref(worker, sample)?))
    }

    /// Mean of the per-sample gradients over `batch`, each clipped to `G`
    /// first when clipping is enabled.
    pub fn minibatch_gradient(&self, w: &ModelVector, worker: usize, batch: &[usize]) -> Result<ModelVector> {
        if batch.is_empty() {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        self.check_point(w)?;
        let mut acc = ModelVector::zeros(self.dim);
        for &i in batch {
            let g = self.sample_gradient(w, self.sample_ref(worker, i)?);
            if self.clipping {
                acc.axpy(1.0, &clip(&g, self.clip_bound));
            } else {
                acc.axpy(1.0, &g);
            }
        }
        acc.scale(1.0 / batch.len() as f64);
        Ok(acc)
    }

    /// `grad F_k(w)` over the whole shard, no clipping.
    pub fn shard_gradient(&self, w: &ModelVector, worker: usize) -> Result<ModelVector> {
        self.check_point(w)?;
        let shard = self
            .shards
            .get(worker)
            .ok_or_else(|| Error::Domain(format!("worker {worker} out of range")))?;
        let mut acc = ModelVector::zeros(self.dim);
        for s in &shard.samples {
            acc.axpy(1.0, &self.sample_gradient(w, s));
        }
        acc.scale(1.0 / shard.size() as f64);
        Ok(acc)
    }

    /// Exact `grad F(w) = sum_k p_k grad F_k(w)`. Metrics only: never clipped.
    pub fn full_gradient(&self, w: &ModelVector) -> Result<ModelVector> {
        self.check_point(w)?;
        if let (TaskKind::Quadratic, Some(opt)) = (self.kind, &self.optimum) {
            return Ok(w.sub(opt).scaled(self.curvature));
        }
        let mut acc = ModelVector::zeros(self.dim);
        for (k, p) in self.weights.iter().enumerate() {
            acc.axpy(*p, &self.shard_gradient(w, k)?);
        }
        Ok(acc)
    }

    /// `F(w)`.
    pub fn loss(&self, w: &ModelVector) -> Result<f64> {
        self.check_point(w)?;
        if let (TaskKind::Quadratic, Some(opt), Some(fstar)) = (self.kind, &self.optimum, self.optimal_value) {
            return Ok(fstar + 0.5 * self.curvature * w.sub(opt).norm_sq());
        }
        Ok(self.direct_loss(w))
    }

    fn direct_loss(&self, w: &ModelVector) -> f64 {
        self.shards
            .iter()
            .zip(&self.weights)
            .map(|(shard, p)| {
                p * shard.samples.iter().map(|s| self.sample_loss_of(w, s)).sum::<f64>() / shard.size() as f64
            })
            .sum()
    }
}

/// Rescales `g` onto the ball of radius `bound` when it lies outside it.
pub fn clip(g: &ModelVector, bound: f64) -> ModelVector {
    let norm = g.norm();
    if norm <= bound {
        g.clone()
    } else {
        let mut out = g.scaled(bound / norm);
        // Guard against the rescaled norm rounding a hair above the bound.
        let n2 = out.norm();
        if n2 > bound {
            out.scale(bound / n2);
        }
        out
    }
}

/// `batch` indices drawn uniformly without replacement from the shard, in
/// ascending order.
pub fn sample_minibatch(shard: &DataShard, batch: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let n = shard.size();
    if batch == 0 || batch > n {
        return Err(Error::InvalidBatch(format!(
            "batch size {batch} not in 1..={n} for worker {}",
            shard.worker_id
        )));
    }
    let mut idx = index::sample(rng, n, batch).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centers_task(centers: &[&[f64]], clipping: bool) -> Task {
        let shards = centers
            .iter()
            .enumerate()
            .map(|(k, cs)| DataShard {
                worker_id: k,
                samples: cs
                    .iter()
                    .map(|&c| Sample { features: vec![c], target: 0.0 })
                    .collect(),
            })
            .collect::<Vec<_>>();
        let k = shards.len();
        Task::from_shards(TaskKind::Quadratic, 1, shards, vec![1.0 / k as f64; k], 1.0, clipping, 1.0, 0, 0).unwrap()
    }

    #[test]
    fn full_shard_batch_is_whole_shard() {
        let task = TaskSpec::new(TaskKind::Quadratic, 2, 2, 4).build().unwrap();
        let mut r = rng::stream(3, "worker", 0);
        assert_eq!(sample_minibatch(task.shard(0), 4, &mut r).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn minibatch_is_deterministic() {
        let task = TaskSpec::new(TaskKind::Quadratic, 2, 2, 100).build().unwrap();
        let a = sample_minibatch(task.shard(1), 10, &mut rng::stream(7, "worker", 1)).unwrap();
        let b = sample_minibatch(task.shard(1), 10, &mut rng::stream(7, "worker", 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let task = TaskSpec::new(TaskKind::Quadratic, 2, 2, 5).build().unwrap();
        let err = sample_minibatch(task.shard(0), 6, &mut rng::stream(0, "worker", 0));
        assert!(matches!(err, Err(Error::InvalidBatch(_))));
        assert!(matches!(task.minibatch_gradient(&ModelVector::zeros(2), 0, &[]), Err(Error::InvalidBatch(_))));
    }

    #[test]
    fn clip_cases() {
        let inside = ModelVector::from_vec(vec![0.3, 0.4]);
        assert_eq!(clip(&inside, 1.0), inside);
        let out = clip(&ModelVector::from_vec(vec![3.0, 4.0]), 1.0);
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&ModelVector::zeros(3), 1.0), ModelVector::zeros(3));
        assert_eq!(clip(&out, f64::INFINITY), out);
    }

    #[test]
    fn quadratic_gradient_vanishes_at_sample_center() {
        let task = TaskSpec::new(TaskKind::Quadratic, 3, 2, 4).build().unwrap();
        let b = ModelVector::from_vec(task.shard(1).samples[2].features.clone());
        assert_eq!(task.per_sample_gradient(&b, 1, 2).unwrap(), ModelVector::zeros(3));
    }

    #[test]
    fn quadratic_closed_forms() {
        let task = TaskSpec::new(TaskKind::Quadratic, 3, 3, 5).build().unwrap();
        let opt = task.optimum().unwrap().clone();
        assert!(task.full_gradient(&opt).unwrap().max_abs() < 1e-15);
        assert!((task.loss(&opt).unwrap() - task.optimal_value().unwrap()).abs() < 1e-12);
        let w = ModelVector::from_vec(vec![0.5, -1.0, 2.0]);
        let g = task.full_gradient(&w).unwrap();
        assert!(g.sub(&w.sub(&opt)).max_abs() < 1e-12);
        // Closed-form loss agrees with direct evaluation over every sample.
        assert!((task.loss(&w).unwrap() - task.direct_loss(&w)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_two_point_loss() {
        // Centers {0} and {2}, equal weights, w = 1: each shard contributes 1/2 * 1/2.
        let task = centers_task(&[&[0.0], &[2.0]], false);
        let w = ModelVector::from_vec(vec![1.0]);
        assert!((task.loss(&w).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(task.optimum().unwrap().as_slice(), &[1.0]);
        assert!((task.optimal_value().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn batch_of_identical_samples_matches_single_gradient() {
        let task = centers_task(&[&[5.0, 5.0, 5.0], &[1.0]], true);
        let w = ModelVector::from_vec(vec![0.0]);
        let single = clip(&task.per_sample_gradient(&w, 0, 0).unwrap(), 1.0);
        let mean = task.minibatch_gradient(&w, 0, &[0, 1, 2]).unwrap();
        assert!((mean[0] - single[0]).abs() < 1e-15);
        assert!(mean.norm() <= 1.0);
    }

    #[test]
    fn unclipped_full_batch_is_shard_mean_offset() {
        let task = centers_task(&[&[1.0, 2.0, 6.0], &[0.0]], false);
        let w = ModelVector::from_vec(vec![10.0]);
        let g = task.minibatch_gradient(&w, 0, &[0, 1, 2]).unwrap();
        assert!((g[0] - (10.0 - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn logistic_loss_at_origin_is_ln2() {
        let task = TaskSpec::new(TaskKind::Logistic, 4, 2, 10).build().unwrap();
        let l = task.loss(&ModelVector::zeros(4)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(task.stat_source(), StatSource::Sampled);
        assert!(task.optimum().is_none());
    }

    #[test]
    fn spec_validation_collects_every_problem() {
        let mut spec = TaskSpec::new(TaskKind::Quadratic, 0, 1, 0);
        spec.clip_bound = -1.0;
        spec.weights = Some(vec![0.7, 0.7]);
        let errs = spec.validate();
        assert!(errs.len() >= 5, "{errs:?}");
        assert!(spec.build().is_err());
    }

    #[test]
    fn non_uniform_weights_shift_the_optimum() {
        let mut spec = TaskSpec::new(TaskKind::Quadratic, 2, 2, 3);
        spec.weights = Some(vec![0.25, 0.75]);
        let task = spec.build().unwrap();
        let opt = task.optimum().unwrap();
        assert!(task.full_gradient(opt).unwrap().max_abs() < 1e-14);
        assert!((task.loss(opt).unwrap() - task.direct_loss(opt)).abs() < 1e-12);
    }

    #[test]
    fn mlp_dimension() {
        let task = TaskSpec::new(TaskKind::Mlp, 3, 2, 5).build().unwrap();
        assert_eq!(task.dim(), 8 * 3 + 17);
        assert!(task.lipschitz_grad() > 0.0);
    }
}
