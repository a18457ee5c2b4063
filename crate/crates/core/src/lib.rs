//! Differentially private asynchronous decentralized parallel SGD.
//!
//! The crate is split along the lines of the system it models:
//!
//! * [`tasks`]: desk-scale objectives, data shards and the clipped gradient oracle.
//! * [`topology`]: communication graphs, pairwise gossip matrices and spectral-gap estimation.
//! * [`privacy`]: the Rényi-DP accountant, noise calibration and the Gaussian noise injector.
//! * [`engine`]: a deterministic discrete-event simulator for the asynchronous
//!   gossip algorithm and a synchronous allreduce baseline.
//! * [`analysis`]: closed-form convergence constants and trace-based convergence reports.
//!
//! All randomness is derived from a single seed through named streams (see [`rng`]),
//! so a `(configuration, seed)` pair always reproduces the same run.

pub mod analysis;
pub mod engine;
mod error;
pub mod privacy;
pub mod rng;
pub mod tasks;
pub mod topology;
mod vector;

pub use error::{Error, Result};
pub use vector::ModelVector;
