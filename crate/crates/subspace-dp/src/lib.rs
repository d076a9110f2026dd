//! Differentially private releases of linear queries over histograms that
//! honor externally mandated linear equalities (totals, marginals, ...)
//! exactly, not just in expectation.
//!
//! The crate decomposes the ambient space into the constraint null space,
//! where calibrated noise lives, and its orthogonal complement, which is
//! released untouched. On top of that it provides:
//!
//! - spherical mechanisms (projected and extended, Gaussian and Laplace),
//! - a correlated Gaussian mechanism built from a minimum-volume enclosing
//!   ellipsoid and a recursive singular-vector split, plus its constrained
//!   variant,
//! - deterministic distributed privatization where agents holding disjoint
//!   blocks reproduce one common noise vector from a shared seed,
//! - a statistical audit suite (moment checks, bias regression, likelihood
//!   ratio probe),
//! - synthetic fixtures for desk-scale reproductions.
//!
//! All randomness flows through [`noise::NoiseSource`]; identical seeds give
//! bitwise identical releases.

pub mod audit;
pub mod budget;
pub mod correlated;
pub mod distributed;
pub mod error;
pub mod invariant;
pub mod mechanism;
pub mod noise;
pub mod query;
pub mod synth;

pub use audit::{
    batch_bias_summary, bias_regression, ratio_probe, run_moment_audit, AuditConfig, AuditReport,
    AuditThresholds, BatchBiasSummary, BiasRegression, RatioProbeSummary,
};
pub use budget::{gaussian_calibration, PrivacyBudget};
pub use correlated::{
    base_decomposition, correlated_gaussian, mvee_symmetric, BaseDecomposition, CorrelatedNoise,
    EllipsoidFactor,
};
pub use distributed::{
    aggregate, assemble_unchecked, centralized_reference, run_distributed, simulate_agents,
    verify_aggregate, AgentReport, AggregateCheck, Partition,
};
pub use error::{Error, Result};
pub use invariant::{build_invariant_system, InvariantSystem, DEFAULT_RANK_TOLERANCE};
pub use mechanism::{
    compose, extended_gaussian, extended_laplace, projected_gaussian, projected_laplace,
    subspace_correlated_gaussian, MechanismId, MechanismRelease, NoiseScale, PreparedMechanism,
};
pub use noise::NoiseSource;
pub use query::{
    build_marginal_invariants, marginal_rows, Histogram, LinearQuery, MarginalSpec, NormOrder,
    TableShape,
};
pub use synth::{campus_fixture, census_fixture, CampusFixture, CensusState};
