use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A subsampled-RDP query outside the regime where the bound is valid.
    #[error("out of regime: {inequality} violated ({lhs} vs {rhs})")]
    OutOfRegime {
        inequality: &'static str,
        lhs: f64,
        rhs: f64,
    },

    #[error("composition error: {0}")]
    Composition(String),

    /// One of the calibration feasibility inequalities does not hold.
    #[error("infeasible privacy budget: {constraint} violated (lhs = {lhs}, rhs = {rhs})")]
    InfeasibleBudget {
        constraint: &'static str,
        lhs: f64,
        rhs: f64,
    },

    #[error("staleness guard breached: update with staleness {staleness} exceeds bound {bound}")]
    StalenessGuard { staleness: usize, bound: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("empty trace")]
    EmptyTrace,
}
