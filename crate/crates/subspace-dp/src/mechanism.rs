//! Noise mechanisms whose releases satisfy linear invariants exactly.
//!
//! All mechanisms here are additive: the release is the true query answer
//! plus a noise vector that depends only on the mechanism configuration and
//! the [`NoiseSource`], never on the data. That structure is what makes the
//! distributed runner's bit-exact aggregation possible, and it makes every
//! release trivially unbiased.
//!
//! Two constructions keep the noise inside the constraint null space:
//! projection (draw full-dimensional noise, project it onto the null space)
//! and extension (draw noise natively in null-space coordinates and rotate
//! it up). Both come in Gaussian and Laplace flavors; a fifth variant shapes
//! Gaussian noise in null-space coordinates with the correlated machinery
//! from [`crate::correlated`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::budget::{gaussian_calibration, PrivacyBudget};
use crate::correlated::{CorrelatedNoise, DEFAULT_MVEE_TOLERANCE};
use crate::error::{Error, Result};
use crate::invariant::{build_invariant_system, InvariantSystem};
use crate::noise::NoiseSource;
use crate::query::{Histogram, LinearQuery, NormOrder};

/// Identifies which noise construction produced a release.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismId {
    ProjectedGaussian,
    ExtendedGaussian,
    ProjectedLaplace,
    ExtendedLaplace,
    CorrelatedGaussian,
    /// A stack of pure-DP releases glued by [`compose`]; not directly
    /// runnable.
    Composed,
}

impl MechanismId {
    /// The five runnable mechanisms, in a fixed documented order.
    pub const RUNNABLE: [MechanismId; 5] = [
        MechanismId::ProjectedGaussian,
        MechanismId::ExtendedGaussian,
        MechanismId::ProjectedLaplace,
        MechanismId::ExtendedLaplace,
        MechanismId::CorrelatedGaussian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MechanismId::ProjectedGaussian => "projected_gaussian",
            MechanismId::ExtendedGaussian => "extended_gaussian",
            MechanismId::ProjectedLaplace => "projected_laplace",
            MechanismId::ExtendedLaplace => "extended_laplace",
            MechanismId::CorrelatedGaussian => "correlated_gaussian",
            MechanismId::Composed => "composed",
        }
    }

    pub fn is_gaussian_family(self) -> bool {
        matches!(
            self,
            MechanismId::ProjectedGaussian
                | MechanismId::ExtendedGaussian
                | MechanismId::CorrelatedGaussian
        )
    }
}

impl std::fmt::Display for MechanismId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MechanismId {
    type Err = Error;

    /// Accepts both snake_case (the serialized form) and kebab-case (the
    /// command-line form).
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "projected_gaussian" => Ok(MechanismId::ProjectedGaussian),
            "extended_gaussian" => Ok(MechanismId::ExtendedGaussian),
            "projected_laplace" => Ok(MechanismId::ProjectedLaplace),
            "extended_laplace" => Ok(MechanismId::ExtendedLaplace),
            "correlated_gaussian" => Ok(MechanismId::CorrelatedGaussian),
            "composed" => Ok(MechanismId::Composed),
            other => Err(Error::InvalidBudget(format!(
                "unknown mechanism id {other:?}"
            ))),
        }
    }
}

/// How the noise magnitude is chosen: calibrated from a privacy budget and
/// the query's sensitivity, or pinned to an explicit scale (per-coordinate
/// standard deviation for Gaussian variants, the distribution scale `b` for
/// Laplace variants, the block multiplier `c` for the correlated variant).
/// Fixed scales are for calibration studies and carry no recorded budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseScale {
    Budget(PrivacyBudget),
    Fixed(f64),
}

impl NoiseScale {
    pub fn budget(&self) -> Option<PrivacyBudget> {
        match self {
            NoiseScale::Budget(b) => Some(*b),
            NoiseScale::Fixed(_) => None,
        }
    }
}

/// A sanitized query answer together with the metadata needed to audit it.
/// Construction verifies the invariant; the true query output never leaves
/// this module.
#[derive(Debug, Clone)]
pub struct MechanismRelease {
    values: DVector<f64>,
    mechanism_id: MechanismId,
    seed: u64,
    stream_id: u64,
    budget: Option<PrivacyBudget>,
    invariant_digest: String,
    analytic_mse: Option<f64>,
    constraint_targets: DVector<f64>,
}

impl MechanismRelease {
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn mechanism_id(&self) -> MechanismId {
        self.mechanism_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn budget(&self) -> Option<PrivacyBudget> {
        self.budget
    }

    pub fn invariant_digest(&self) -> &str {
        &self.invariant_digest
    }

    /// Expected squared error of the mechanism that produced this release.
    pub fn analytic_mse(&self) -> Option<f64> {
        self.analytic_mse
    }

    /// The exact constraint values `C * A(h)` this release reproduces. These
    /// are public by definition: the invariant mandates them.
    pub fn constraint_targets(&self) -> &DVector<f64> {
        &self.constraint_targets
    }

    /// Serialized release metadata. Exactly the keys listed here; consumers
    /// rely on the shape.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mechanism_id": self.mechanism_id.as_str(),
            "seed": self.seed,
            "epsilon": self.budget.map(|b| b.epsilon),
            "delta": self.budget.map(|b| b.delta),
            "analytic_mse": self.analytic_mse,
            "values": self.values.iter().copied().collect::<Vec<f64>>(),
            "invariant_digest": self.invariant_digest,
        })
    }
}

/// Resolved noise plan for one (mechanism, query, system, scale) choice.
/// Preparing once and sampling many times amortizes sensitivity scans and
/// the correlated variant's ellipsoid work; every agent or repetition that
/// prepares from equal inputs runs the identical floating-point code path,
/// so the resulting noise is bitwise reproducible.
#[derive(Debug, Clone)]
pub struct PreparedMechanism<'a> {
    query: &'a LinearQuery,
    sys: &'a InvariantSystem,
    id: MechanismId,
    budget: Option<PrivacyBudget>,
    analytic_mse: f64,
    kind: PreparedKind,
}

#[derive(Debug, Clone)]
enum PreparedKind {
    /// Draw n iid coordinates, then project onto the null space.
    ProjectedSpherical { scale: f64, gaussian: bool },
    /// Draw n - n_c iid coordinates in null coordinates, rotate up.
    ExtendedSpherical { scale: f64, gaussian: bool },
    /// Correlated Gaussian over the projected query, rotated up.
    Correlated(CorrelatedNoise),
}

impl<'a> PreparedMechanism<'a> {
    /// Validate and resolve a mechanism over `query` constrained by `sys`.
    ///
    /// Budgeted Gaussian variants require `delta > 0`; Laplace variants use
    /// only `epsilon` and record the budget as `(epsilon, 0)`. The
    /// correlated variant requires the projected query to keep full row
    /// rank; losing rank means the invariants absorb query directions and
    /// no full-dimensional noise shape exists for it.
    pub fn prepare(
        id: MechanismId,
        query: &'a LinearQuery,
        sys: &'a InvariantSystem,
        scale: NoiseScale,
    ) -> Result<Self> {
        Self::prepare_with(id, query, sys, scale, DEFAULT_MVEE_TOLERANCE, None)
    }

    /// [`PreparedMechanism::prepare`] with explicit ellipsoid controls for
    /// the correlated variant (ignored by the spherical ones).
    pub fn prepare_with(
        id: MechanismId,
        query: &'a LinearQuery,
        sys: &'a InvariantSystem,
        scale: NoiseScale,
        mvee_tolerance: f64,
        mvee_max_iters: Option<usize>,
    ) -> Result<Self> {
        if query.n() != sys.n() {
            return Err(Error::DimensionMismatch {
                what: "query output vs invariant system",
                expected: sys.n(),
                got: query.n(),
            });
        }
        let free = (sys.n() - sys.n_c()) as f64;
        let budget = scale.budget();

        // Projected mechanisms calibrate to the raw query's sensitivity;
        // extended mechanisms calibrate to the projected query's, which is
        // never larger.
        let resolve_spherical = |gaussian: bool, raw_sensitivity: bool| -> Result<f64> {
            match scale {
                NoiseScale::Fixed(s) => {
                    if !s.is_finite() || s < 0.0 {
                        Err(Error::InvalidBudget(format!(
                            "fixed noise scale must be finite and non-negative, got {s}"
                        )))
                    } else {
                        Ok(s)
                    }
                }
                NoiseScale::Budget(b) => {
                    let norm = if gaussian {
                        NormOrder::L2
                    } else {
                        NormOrder::L1
                    };
                    let sens = if raw_sensitivity {
                        query.l_p_sensitivity(norm)
                    } else {
                        query.projected_query(sys)?.l_p_sensitivity(norm)
                    };
                    if gaussian {
                        gaussian_calibration(&b, sens)
                    } else {
                        Ok(sens / b.epsilon)
                    }
                }
            }
        };

        let (kind, analytic_mse, budget) = match id {
            MechanismId::ProjectedGaussian => {
                let s = resolve_spherical(true, true)?;
                (
                    PreparedKind::ProjectedSpherical {
                        scale: s,
                        gaussian: true,
                    },
                    free * s * s,
                    budget,
                )
            }
            MechanismId::ExtendedGaussian => {
                let s = resolve_spherical(true, false)?;
                (
                    PreparedKind::ExtendedSpherical {
                        scale: s,
                        gaussian: true,
                    },
                    free * s * s,
                    budget,
                )
            }
            MechanismId::ProjectedLaplace => {
                let s = resolve_spherical(false, true)?;
                (
                    PreparedKind::ProjectedSpherical {
                        scale: s,
                        gaussian: false,
                    },
                    2.0 * free * s * s,
                    budget.map(|b| PrivacyBudget {
                        epsilon: b.epsilon,
                        delta: 0.0,
                    }),
                )
            }
            MechanismId::ExtendedLaplace => {
                let s = resolve_spherical(false, false)?;
                (
                    PreparedKind::ExtendedSpherical {
                        scale: s,
                        gaussian: false,
                    },
                    2.0 * free * s * s,
                    budget.map(|b| PrivacyBudget {
                        epsilon: b.epsilon,
                        delta: 0.0,
                    }),
                )
            }
            MechanismId::CorrelatedGaussian => {
                let projected = query.projected_query(sys)?;
                let needed = sys.null_dim();
                let rank = projected
                    .matrix()
                    .clone()
                    .svd(false, false)
                    .rank(1e-12 * needed.max(projected.d()).max(1) as f64);
                if rank < needed {
                    return Err(Error::ProjectedRankDeficient { rank, needed });
                }
                let c = match scale {
                    NoiseScale::Fixed(s) => s,
                    NoiseScale::Budget(b) => b.c_eps_delta()?,
                };
                let noise =
                    CorrelatedNoise::prepare_with(&projected, c, mvee_tolerance, mvee_max_iters)?;
                let mse = noise.analytic_mse();
                (PreparedKind::Correlated(noise), mse, budget)
            }
            MechanismId::Composed => {
                return Err(Error::NonAdditiveMechanism(
                    "composed releases are assembled by compose(), not sampled".into(),
                ))
            }
        };

        Ok(PreparedMechanism {
            query,
            sys,
            id,
            budget,
            analytic_mse,
            kind,
        })
    }

    pub fn mechanism_id(&self) -> MechanismId {
        self.id
    }

    pub fn analytic_mse(&self) -> f64 {
        self.analytic_mse
    }

    pub fn budget(&self) -> Option<PrivacyBudget> {
        self.budget
    }

    /// The noise vector alone: a pure function of `source` and the prepared
    /// configuration, independent of any histogram.
    pub fn noise(&self, source: NoiseSource) -> DVector<f64> {
        match &self.kind {
            PreparedKind::ProjectedSpherical { scale, gaussian } => {
                let mut sampler = source.sampler();
                let raw = if *gaussian {
                    sampler.gaussian_vector(self.sys.n(), *scale)
                } else {
                    sampler.laplace_vector(self.sys.n(), *scale)
                };
                self.sys
                    .project_to_null(&raw)
                    .expect("projection dimensions verified at prepare time")
            }
            PreparedKind::ExtendedSpherical { scale, gaussian } => {
                let mut sampler = source.sampler();
                let raw = if *gaussian {
                    sampler.gaussian_vector(self.sys.null_dim(), *scale)
                } else {
                    sampler.laplace_vector(self.sys.null_dim(), *scale)
                };
                self.sys.q_null() * raw
            }
            PreparedKind::Correlated(noise) => self.sys.q_null() * noise.noise(source),
        }
    }

    /// Exact covariance of [`PreparedMechanism::noise`], n x n. Both
    /// spherical variants have covariance v P_N with per-coordinate
    /// variance v (sigma^2 for Gaussian draws, 2 b^2 for Laplace); the
    /// correlated variant carries its block shape up from null
    /// coordinates: k c^2 Q_N (sum_i r_i^2 U_i U_i^T) Q_N^T.
    pub fn noise_covariance(&self) -> DMatrix<f64> {
        match &self.kind {
            PreparedKind::ProjectedSpherical { scale, gaussian }
            | PreparedKind::ExtendedSpherical { scale, gaussian } => {
                let v = if *gaussian {
                    scale * scale
                } else {
                    2.0 * scale * scale
                };
                self.sys.proj_null() * v
            }
            PreparedKind::Correlated(noise) => {
                let dec = noise.decomposition();
                let mut shape = DMatrix::zeros(dec.n(), dec.n());
                for block in dec.blocks() {
                    shape.gemm(
                        block.radius() * block.radius(),
                        block.basis(),
                        &block.basis().transpose(),
                        1.0,
                    );
                }
                let factor = dec.k() as f64 * noise.c() * noise.c();
                let q = self.sys.q_null();
                q * (shape * factor) * q.transpose()
            }
        }
    }

    /// Produce a release: `values = A(h) + noise`, checked against the
    /// invariant at the release tolerance before anything is returned.
    pub fn release(&self, h: &Histogram, source: NoiseSource) -> Result<MechanismRelease> {
        let query_output = self.query.evaluate(h)?;
        let values = &query_output + self.noise(source);
        finish_release(
            values,
            query_output,
            self.sys,
            self.id,
            self.budget,
            Some(self.analytic_mse),
            source,
        )
    }
}

/// Shared release assembly: verify the invariant, compute the targets, and
/// package the metadata.
fn finish_release(
    values: DVector<f64>,
    query_output: DVector<f64>,
    sys: &InvariantSystem,
    id: MechanismId,
    budget: Option<PrivacyBudget>,
    analytic_mse: Option<f64>,
    source: NoiseSource,
) -> Result<MechanismRelease> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput("release values"));
    }
    let targets = sys.apply_constraints(&query_output)?;
    let achieved = sys.apply_constraints(&values)?;
    let deviation = (&achieved - &targets).abs().max();
    let tolerance = sys.release_tolerance(&query_output);
    if deviation > tolerance {
        return Err(Error::InvariantViolation {
            deviation,
            tolerance,
        });
    }
    Ok(MechanismRelease {
        values,
        mechanism_id: id,
        seed: source.seed,
        stream_id: source.stream_id,
        budget,
        invariant_digest: sys.digest().to_string(),
        analytic_mse,
        constraint_targets: targets,
    })
}

/// Gaussian noise projected onto the constraint null space. Expected squared
/// error `(n - n_c) * (c * l2_sensitivity)^2`.
pub fn projected_gaussian(
    query: &LinearQuery,
    h: &Histogram,
    sys: &InvariantSystem,
    budget: &PrivacyBudget,
    source: NoiseSource,
) -> Result<MechanismRelease> {
    PreparedMechanism::prepare(
        MechanismId::ProjectedGaussian,
        query,
        sys,
        NoiseScale::Budget(*budget),
    )?
    .release(h, source)
}

/// Gaussian noise drawn in null-space coordinates, calibrated to the
/// projected query's (never larger) sensitivity. Expected squared error
/// `(n - n_c) * (c * l2_sensitivity(Q_N^T A))^2`.
pub fn extended_gaussian(
    query: &LinearQuery,
    h: &Histogram,
    sys: &InvariantSystem,
    budget: &PrivacyBudget,
    source: NoiseSource,
) -> Result<MechanismRelease> {
    PreparedMechanism::prepare(
        MechanismId::ExtendedGaussian,
        query,
        sys,
        NoiseScale::Budget(*budget),
    )?
    .release(h, source)
}

/// Laplace noise projected onto the constraint null space; pure DP. Expected
/// squared error `2 b^2 (n - n_c)` with `b = l1_sensitivity / epsilon`.
pub fn projected_laplace(
    query: &LinearQuery,
    h: &Histogram,
    sys: &InvariantSystem,
    budget: &PrivacyBudget,
    source: NoiseSource,
) -> Result<MechanismRelease> {
    PreparedMechanism::prepare(
        MechanismId::ProjectedLaplace,
        query,
        sys,
        NoiseScale::Budget(*budget),
    )?
    .release(h, source)
}

/// Laplace noise drawn in null-space coordinates; pure DP.
pub fn extended_laplace(
    query: &LinearQuery,
    h: &Histogram,
    sys: &InvariantSystem,
    budget: &PrivacyBudget,
    source: NoiseSource,
) -> Result<MechanismRelease> {
    PreparedMechanism::prepare(
        MechanismId::ExtendedLaplace,
        query,
        sys,
        NoiseScale::Budget(*budget),
    )?
    .release(h, source)
}

/// Correlated Gaussian noise shaped in null-space coordinates: the release
/// is `A(h) + Q_N w` where `w` is the correlated noise of the projected
/// query `Q_N^T A`. The constraint is satisfied because `C Q_N = 0`, and the
/// release error equals the inner mechanism's error because `Q_N` preserves
/// norms.
pub fn subspace_correlated_gaussian(
    query: &LinearQuery,
    h: &Histogram,
    sys: &InvariantSystem,
    budget: &PrivacyBudget,
    source: NoiseSource,
) -> Result<MechanismRelease> {
    PreparedMechanism::prepare(
        MechanismId::CorrelatedGaussian,
        query,
        sys,
        NoiseScale::Budget(*budget),
    )?
    .release(h, source)
}

/// Stack pure-DP releases into one release over the block-diagonal
/// invariant. Budgets add; every component must be pure DP (`delta = 0`)
/// with a recorded budget, and each release must carry the digest of its
/// paired invariant system.
pub fn compose(
    components: &[(&MechanismRelease, &InvariantSystem)],
) -> Result<(MechanismRelease, InvariantSystem)> {
    if components.is_empty() {
        return Err(Error::EmptyInput("composition component list"));
    }
    let mut epsilon_total = 0.0;
    for (release, sys) in components {
        match release.budget {
            Some(b) if b.delta == 0.0 => epsilon_total += b.epsilon,
            _ => return Err(Error::MixedDelta),
        }
        if release.invariant_digest != sys.digest() {
            return Err(Error::SystemMismatch(format!(
                "release digest {} does not match system digest {}",
                release.invariant_digest,
                sys.digest()
            )));
        }
    }

    let total_n: usize = components.iter().map(|(r, _)| r.values.len()).sum();
    let total_rows: usize = components.iter().map(|(_, s)| s.c_raw().nrows()).sum();
    let mut stacked_c = nalgebra::DMatrix::zeros(total_rows, total_n);
    let mut values = DVector::zeros(total_n);
    let mut targets_parts: Vec<f64> = Vec::new();
    let (mut row, mut col) = (0, 0);
    for (release, sys) in components {
        let c = sys.c_raw();
        stacked_c
            .view_mut((row, col), (c.nrows(), c.ncols()))
            .copy_from(c);
        values
            .rows_mut(col, release.values.len())
            .copy_from(&release.values);
        targets_parts.extend(release.constraint_targets.iter());
        row += c.nrows();
        col += c.ncols();
    }

    let composed_sys = build_invariant_system(stacked_c, None)?;

    let ids: Vec<MechanismId> = components.iter().map(|(r, _)| r.mechanism_id).collect();
    let id = if ids.iter().all(|&i| i == ids[0]) {
        ids[0]
    } else {
        MechanismId::Composed
    };
    let analytic_mse: Option<f64> = components
        .iter()
        .map(|(r, _)| r.analytic_mse)
        .try_fold(0.0, |acc, m| m.map(|v| acc + v));

    // The stacked constraint targets are exactly the concatenated component
    // targets (block structure); verify the stacked values against them.
    let targets = DVector::from_vec(targets_parts);
    let achieved = composed_sys.apply_constraints(&values)?;
    // Raw rows of the composed system are the component rows verbatim, so
    // target vectors align index-by-index.
    let deviation = (&achieved - &targets).abs().max();
    let tolerance = composed_sys.release_tolerance(&values);
    if deviation > tolerance {
        return Err(Error::InvariantViolation {
            deviation,
            tolerance,
        });
    }

    let release = MechanismRelease {
        values,
        mechanism_id: id,
        seed: components[0].0.seed,
        stream_id: components[0].0.stream_id,
        budget: Some(PrivacyBudget {
            epsilon: epsilon_total,
            delta: 0.0,
        }),
        invariant_digest: composed_sys.digest().to_string(),
        analytic_mse,
        constraint_targets: targets,
    };
    Ok((release, composed_sys))
}
