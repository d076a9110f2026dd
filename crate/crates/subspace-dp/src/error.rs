use thiserror::Error;

/// Crate-wide error type. Construction-time validation failures and
/// mechanism-level rejections all surface through this enum so callers can
/// match on the failure class.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite entries in {0}")]
    NonFiniteInput(&'static str),

    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),

    #[error("constraint matrix is numerically zero; no invariant is expressed")]
    ZeroConstraint,

    #[error("constraint matrix has full column rank {rank}; the null space is trivial")]
    FullRankConstraint { rank: usize },

    #[error("gram matrix of the reduced constraints is singular; rank tolerance is misconfigured")]
    SingularGram,

    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),

    #[error("delta must be positive for Gaussian-family mechanisms (approximate DP)")]
    DeltaZero,

    #[error("composition requires every component release to be pure DP (delta = 0) with a recorded budget")]
    MixedDelta,

    #[error("released values violate the invariant: deviation {deviation:e} exceeds tolerance {tolerance:e}")]
    InvariantViolation { deviation: f64, tolerance: f64 },

    #[error("negative count {value} at index {index}; histograms are non-negative")]
    NegativeCount { index: usize, value: f64 },

    #[error("invalid marginal spec: {0}")]
    AxisOverlap(String),

    #[error("point set spans only {spanned} of {needed} dimensions; the enclosing ellipsoid is degenerate")]
    RankDeficientPoints { spanned: usize, needed: usize },

    #[error("projected query matrix has rank {rank}, need full row rank {needed}")]
    ProjectedRankDeficient { rank: usize, needed: usize },

    #[error("invalid partition: {0}")]
    PartitionInvalid(String),

    #[error("mechanism {0} is not additive; distributed privatization requires data-independent additive noise")]
    NonAdditiveMechanism(String),

    #[error("agent {agent_id} missing from the report set")]
    MissingAgent { agent_id: u64 },

    #[error(
        "agent {agent_id} reports a noise digest inconsistent with its peers; common seed violated"
    )]
    DigestMismatch { agent_id: u64 },

    #[error("regressor is degenerate: all units share the same true value")]
    DegenerateRegressor,

    #[error("regression needs at least {needed} units, got {got}")]
    TooFewUnits { got: usize, needed: usize },

    #[error("no histogram bin reached the minimum occupancy on both sides; increase repetitions")]
    InsufficientMass,

    #[error("malformed wire payload: {0}")]
    WireFormat(String),

    #[error("release does not belong to the supplied invariant system: {0}")]
    SystemMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
