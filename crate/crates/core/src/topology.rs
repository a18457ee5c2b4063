//! Communication graphs, pairwise gossip matrices and spectral-gap machinery.
//!
//! Each iteration couples the active worker with one neighbour chosen uniformly
//! at random; the coupled pair replaces both models by their midpoint. The
//! averaging matrix is therefore the identity except for the `2x2` block
//! `[[1/2, 1/2], [1/2, 1/2]]` on the pair, which is symmetric, doubly stochastic
//! and idempotent.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::vector::ModelVector;

/// Sender/receiver partition of the workers. Every edge joins a sender to a receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bipartition {
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    workers: usize,
    edges: BTreeSet<(usize, usize)>,
    neighbours: Vec<Vec<usize>>,
    partition: Option<Bipartition>,
}

impl CommGraph {
    /// Builds a graph from unordered edges. With a partition, every edge must
    /// cross it. The graph must be connected.
    pub fn new(workers: usize, edges: &[(usize, usize)], partition: Option<Bipartition>) -> Result<Self> {
        if workers < 2 {
            return Err(Error::Topology(format!("need at least 2 workers, got {workers}")));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= workers || b >= workers {
                return Err(Error::Topology(format!("edge ({a}, {b}) references a worker >= {workers}")));
            }
            if a == b {
                return Err(Error::Topology(format!("self-loop on worker {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        if let Some(p) = &partition {
            let mut role = vec![None; workers];
            for &s in &p.senders {
                if s >= workers {
                    return Err(Error::Topology(format!("sender {s} out of range")));
                }
                role[s] = Some(true);
            }
            for &r in &p.receivers {
                if r >= workers || role[r].is_some() {
                    return Err(Error::Topology(format!("receiver {r} out of range or also a sender")));
                }
                role[r] = Some(false);
            }
            if role.iter().any(Option::is_none) {
                return Err(Error::Topology("senders and receivers must cover every worker".into()));
            }
            if let Some(&(a, b)) = set.iter().find(|(a, b)| role[*a] == role[*b]) {
                return Err(Error::Topology(format!("edge ({a}, {b}) does not join a sender to a receiver")));
            }
        }
        let mut neighbours = vec![Vec::new(); workers];
        for &(a, b) in &set {
            neighbours[a].push(b);
            neighbours[b].push(a);
        }
        for n in &mut neighbours {
            n.sort_unstable();
        }
        let graph = Self { workers, edges: set, neighbours, partition };
        if !graph.is_connected() {
            return Err(Error::Topology("communication graph is not connected".into()));
        }
        Ok(graph)
    }

    /// Workers on a ring; even indices send, odd indices receive, and each
    /// sender talks to its two ring neighbours.
    pub fn ring(workers: usize) -> Result<Self> {
        if workers < 2 || !workers.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ring partition needs an even number of workers >= 2, got {workers}"
            )));
        }
        let edges: Vec<_> = (0..workers).map(|i| (i, (i + 1) % workers)).collect();
        Self::new(workers, &edges, Some(Self::parity_partition(workers)))
    }

    /// Every even worker connected to every odd worker.
    pub fn full_bipartite(workers: usize) -> Result<Self> {
        if workers < 2 || !workers.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "bipartite graph needs an even number of workers >= 2, got {workers}"
            )));
        }
        let edges: Vec<_> = (0..workers)
            .step_by(2)
            .flat_map(|s| (1..workers).step_by(2).map(move |r| (s, r)))
            .collect();
        Self::new(workers, &edges, Some(Self::parity_partition(workers)))
    }

    /// All pairs, no sender/receiver roles.
    pub fn complete(workers: usize) -> Result<Self> {
        let edges: Vec<_> = (0..workers)
            .flat_map(|a| (a + 1..workers).map(move |b| (a, b)))
            .collect();
        Self::new(workers, &edges, None)
    }

    fn parity_partition(workers: usize) -> Bipartition {
        Bipartition {
            senders: (0..workers).step_by(2).collect(),
            receivers: (1..workers).step_by(2).collect(),
        }
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.workers];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &self.neighbours[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbours(&self, worker: usize) -> &[usize] {
        &self.neighbours[worker]
    }

    pub fn partition(&self) -> Option<&Bipartition> {
        self.partition.as_ref()
    }

    pub fn is_sender(&self, worker: usize) -> bool {
        match &self.partition {
            Some(p) => p.senders.contains(&worker),
            None => true,
        }
    }

    /// Orders a coupled pair as `(sender, receiver)` when roles exist.
    fn orient(&self, a: usize, b: usize) -> (usize, usize) {
        match &self.partition {
            Some(_) if !self.is_sender(a) => (b, a),
            Some(_) => (a, b),
            None => (a.min(b), a.max(b)),
        }
    }
}

/// A pairwise averaging matrix `A_t`, stored as the coupled pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GossipMatrix {
    workers: usize,
    pair: (usize, usize),
}

impl GossipMatrix {
    pub fn pairwise(workers: usize, i: usize, j: usize) -> Result<Self> {
        if i == j || i >= workers || j >= workers {
            return Err(Error::Topology(format!("invalid pair ({i}, {j}) for {workers} workers")));
        }
        Ok(Self { workers, pair: (i, j) })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn pair(&self) -> (usize, usize) {
        self.pair
    }

    pub fn entries(&self) -> DMatrix<f64> {
        let mut a = DMatrix::identity(self.workers, self.workers);
        let (i, j) = self.pair;
        a[(i, i)] = 0.5;
        a[(j, j)] = 0.5;
        a[(i, j)] = 0.5;
        a[(j, i)] = 0.5;
        a
    }
}

/// Largest deviation of any row or column sum from 1; `None` if an entry is negative.
pub fn doubly_stochastic_error(a: &DMatrix<f64>) -> Option<f64> {
    if a.iter().any(|&x| x < 0.0) {
        return None;
    }
    let rows = a.row_iter().map(|r| (r.sum() - 1.0).abs());
    let cols = a.column_iter().map(|c| (c.sum() - 1.0).abs());
    Some(rows.chain(cols).fold(0.0, f64::max))
}

/// Couples `active` with a neighbour drawn uniformly at random. A sender picks
/// among its receivers; a receiver is paired through its sender neighbours.
pub fn sample_gossip_matrix(graph: &CommGraph, active: usize, rng: &mut SeededRng) -> Result<GossipMatrix> {
    if active >= graph.workers() {
        return Err(Error::Topology(format!("worker {active} out of range")));
    }
    let nbrs = graph.neighbours(active);
    if nbrs.is_empty() {
        return Err(Error::Topology(format!("worker {active} has no neighbours")));
    }
    let partner = nbrs[rng.random_range(0..nbrs.len())];
    let (i, j) = graph.orient(active, partner);
    GossipMatrix::pairwise(graph.workers(), i, j)
}

/// `[w_1', ..., w_K'] = [w_1, ..., w_K] A`, computed column by column from
/// the dense matrix.
pub fn apply_averaging(models: &[ModelVector], a: &GossipMatrix) -> Result<Vec<ModelVector>> {
    apply_dense(models, &a.entries())
}

/// Dense `W A` for an arbitrary `K x K` mixing matrix.
pub fn apply_dense(models: &[ModelVector], a: &DMatrix<f64>) -> Result<Vec<ModelVector>> {
    let k = models.len();
    if a.nrows() != k || a.ncols() != k {
        return Err(Error::Shape(format!(
            "{} models but a {}x{} mixing matrix",
            k,
            a.nrows(),
            a.ncols()
        )));
    }
    let d = models.first().map_or(0, ModelVector::dim);
    if models.iter().any(|m| m.dim() != d) {
        return Err(Error::Shape("models have different dimensions".into()));
    }
    Ok((0..k)
        .map(|j| {
            let mut col = ModelVector::zeros(d);
            for (i, w) in models.iter().enumerate() {
                let aij = a[(i, j)];
                if aij != 0.0 {
                    col.axpy(aij, w);
                }
            }
            col
        })
        .collect())
}

/// In-place pairwise averaging: only the coupled pair changes.
pub fn average_pair_in_place(models: &mut [ModelVector], a: &GossipMatrix) -> Result<()> {
    if models.len() != a.workers() {
        return Err(Error::Shape(format!(
            "{} models for a {}-worker gossip matrix",
            models.len(),
            a.workers()
        )));
    }
    let (i, j) = a.pair();
    if models[i].dim() != models[j].dim() {
        return Err(Error::Shape("paired models have different dimensions".into()));
    }
    let (lo, hi) = (i.min(j), i.max(j));
    let (head, tail) = models.split_at_mut(hi);
    let (wa, wb) = (&mut head[lo], &mut tail[0]);
    for (x, y) in wa.as_mut_slice().iter_mut().zip(wb.as_mut_slice()) {
        let mid = 0.5 * (*x + *y);
        *x = mid;
        *y = mid;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralMode {
    /// Enumerate every (active worker, partner) outcome with its probability.
    Exact,
    /// Average `A^T A` over this many sampled matrices.
    MonteCarlo(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCount {
    Exact,
    Draws(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub rho: f64,
    pub rho_bar: f64,
    /// Eigenvalues of the estimated `E[A^T A]`, descending.
    pub eigenvalues: Vec<f64>,
    pub n_samples: SampleCount,
}

const EIGEN_TOL: f64 = 1e-10;
const EIGEN_MAX_ITER: usize = 10_000;

/// Spectral quantity `rho = max(|lambda_2|, |lambda_K|)` of `E[A^T A]` under
/// uniform worker activation and uniform neighbour choice.
pub fn estimate_spectral_gap(graph: &CommGraph, mode: SpectralMode, rng: &mut SeededRng) -> Result<SpectralEstimate> {
    let k = graph.workers();
    let mut expected = DMatrix::<f64>::zeros(k, k);
    let n_samples = match mode {
        SpectralMode::Exact => {
            for active in 0..k {
                let nbrs = graph.neighbours(active);
                let p = 1.0 / (k as f64 * nbrs.len() as f64);
                for &partner in nbrs {
                    let (i, j) = graph.orient(active, partner);
                    let a = GossipMatrix::pairwise(k, i, j)?.entries();
                    expected += (a.transpose() * &a) * p;
                }
            }
            SampleCount::Exact
        }
        SpectralMode::MonteCarlo(draws) => {
            if draws == 0 {
                return Err(Error::Domain("Monte-Carlo estimate needs at least one draw".into()));
            }
            for _ in 0..draws {
                let active = rng.random_range(0..k);
                let a = sample_gossip_matrix(graph, active, rng)?.entries();
                expected += a.transpose() * &a;
            }
            expected /= draws as f64;
            SampleCount::Draws(draws)
        }
    };
    let eigenvalues = symmetric_eigenvalues(&expected)?;
    let rho = eigenvalues[1].abs().max(eigenvalues[k - 1].abs());
    if rho >= 1.0 - 1e-9 {
        return Err(Error::Topology(format!(
            "gossip pattern does not mix (rho = {rho}); the graph is effectively disconnected"
        )));
    }
    Ok(SpectralEstimate {
        rho,
        rho_bar: rho_bar(k, rho)?,
        eigenvalues,
        n_samples,
    })
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = m
        .clone()
        .try_symmetric_eigen(EIGEN_TOL * 1e-3, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// `rho_bar = (K-1)/K * (1/(1-rho) + 2 sqrt(rho) / (1 - sqrt(rho))^2)`.
pub fn rho_bar(workers: usize, rho: f64) -> Result<f64> {
    if workers < 2 {
        return Err(Error::Domain(format!("rho_bar needs K >= 2, got {workers}")));
    }
    if !(0.0..1.0 - 1e-9).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 1 - 1e-9), got {rho}")));
    }
    let k = workers as f64;
    let s = rho.sqrt();
    Ok((k - 1.0) / k * (1.0 / (1.0 - rho) + 2.0 * s / ((1.0 - s) * (1.0 - s))))
}
