//! Statistical verification harness for release mechanisms.
//!
//! Four independent checks, all reproducible bit for bit from a seed:
//!
//! - moment audit: per-coordinate mean errors against guard-band CIs,
//!   empirical vs analytic MSE, optional full error covariance against the
//!   mechanism's exact noise covariance, the invariant residual on every
//!   run, and (projected Gaussian only) one-dimensional KS tests along
//!   fixed null-space directions;
//! - bias regression: OLS slope of release error against the log of the
//!   true value, the standard diagnostic for invariant-induced bias;
//! - batch summary: how many of a family of regressions come out
//!   significantly negative, compared with the nominal false-positive rate;
//! - ratio probe: empirical privacy-loss estimate for mechanisms with a
//!   one-dimensional null space, binning released scalars under two
//!   neighboring databases.
//!
//! The moment audit reports statistical failures through pass flags; it
//! returns `Err` only for configuration problems. Thresholds travel inside
//! the report so a stored report is self-describing.
//!
//! Reproducibility: repetitions are split into fixed chunks of
//! [`AUDIT_CHUNK`] runs keyed by stream id. Chunks are accumulated
//! independently (in stream order within each chunk), collected in chunk
//! order, and merged pairwise in a fixed tree. The float result is
//! therefore identical whatever the rayon thread count, and pairwise
//! merging keeps summation error O(log R) instead of O(R).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::invariant::InvariantSystem;
use crate::mechanism::{MechanismId, NoiseScale, PreparedMechanism};
use crate::noise::NoiseSource;
use crate::query::{Histogram, LinearQuery};

/// Fixed repetition block size for deterministic parallel reduction.
pub const AUDIT_CHUNK: usize = 1024;

/// Pass thresholds. These are configuration, not constants baked into the
/// checks, and they are embedded in every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditThresholds {
    /// Relative tolerance for empirical vs analytic MSE.
    pub mse_rel_tol: f64,
    /// Mean-error CI half-width in units of std/sqrt(R). The default 5
    /// keeps the false-alarm probability per coordinate below 1e-6, so a
    /// whole suite of audits stays quiet under the null.
    pub mean_guard: f64,
    /// Covariance deviation allowance in units of the entrywise sampling
    /// std bound.
    pub cov_guard: f64,
    /// KS significance level per direction.
    pub ks_alpha: f64,
}

impl Default for AuditThresholds {
    fn default() -> Self {
        AuditThresholds {
            mse_rel_tol: 0.05,
            mean_guard: 5.0,
            cov_guard: 5.0,
            ks_alpha: 0.001,
        }
    }
}

/// Everything a moment audit needs. Build with [`AuditConfig::new`] and
/// toggle the optional parts.
#[derive(Debug, Clone)]
pub struct AuditConfig<'a> {
    pub mechanism: MechanismId,
    pub query: &'a LinearQuery,
    pub histogram: &'a Histogram,
    pub system: &'a InvariantSystem,
    pub scale: NoiseScale,
    pub repetitions: usize,
    pub seed: u64,
    /// Accumulate the d x d error second-moment matrix (O(R d^2) work).
    pub compute_covariance: bool,
    /// Keep every run's error vector in the report (O(R d) memory; meant
    /// for small R, e.g. boxplot data).
    pub keep_per_run: bool,
    pub thresholds: AuditThresholds,
}

impl<'a> AuditConfig<'a> {
    pub fn new(
        mechanism: MechanismId,
        query: &'a LinearQuery,
        histogram: &'a Histogram,
        system: &'a InvariantSystem,
        scale: NoiseScale,
        repetitions: usize,
        seed: u64,
    ) -> Self {
        AuditConfig {
            mechanism,
            query,
            histogram,
            system,
            scale,
            repetitions,
            seed,
            compute_covariance: false,
            keep_per_run: false,
            thresholds: AuditThresholds::default(),
        }
    }
}

/// Empirical error covariance vs the mechanism's exact noise covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub max_abs_deviation: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// One-sample KS tests of the released law along fixed null directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsCheck {
    /// Number of directions tested: the first `min(3, n - n_c)` columns of
    /// the stored null basis, a fixed seed-independent choice.
    pub directions: usize,
    pub statistics: Vec<f64>,
    pub p_values: Vec<f64>,
    pub alpha: f64,
    pub pass: bool,
}

/// Error-vs-log-true-value OLS fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasRegression {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
    /// Two-sided p-value for slope = 0. Conventions for a perfect fit
    /// (zero residuals): p = 1 when the slope is 0, else p = 0.
    pub p_value: f64,
    pub units: usize,
}

impl BiasRegression {
    /// Two-sided confidence interval for the slope at level `1 - alpha`.
    pub fn slope_ci(&self, alpha: f64) -> (f64, f64) {
        if self.std_error == 0.0 {
            return (self.slope, self.slope);
        }
        let t = StudentsT::new(0.0, 1.0, (self.units - 2) as f64)
            .expect("valid dof checked at construction")
            .inverse_cdf(1.0 - alpha / 2.0);
        (
            self.slope - t * self.std_error,
            self.slope + t * self.std_error,
        )
    }
}

/// Outcome of a batch of bias regressions, scored against the nominal
/// false-positive rate for significant negative slopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchBiasSummary {
    pub regressions: usize,
    pub alpha: f64,
    pub significant_negative: usize,
    /// P(X >= observed) for X ~ Binomial(regressions, alpha / 2): under an
    /// unbiased mechanism a significant negative slope is a one-sided
    /// false positive.
    pub exceedance_p: f64,
    pub exceedance_threshold: f64,
    pub pass: bool,
}

/// Result of the binned likelihood-ratio probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioProbeSummary {
    pub mechanism_id: MechanismId,
    pub epsilon: f64,
    pub reps_per_side: usize,
    pub bins: usize,
    pub min_hits: usize,
    /// Bins where both sides reached `min_hits`.
    pub qualified_bins: usize,
    pub max_log_ratio: f64,
    /// epsilon + slack at the bin achieving `max_log_ratio`.
    pub bound_at_max: f64,
    pub pass: bool,
}

/// Moment-audit output. `pass` covers the checks this audit ran; `bias`
/// and `ratio_probe` slots exist so callers can attach companion results
/// and serialize one document, and they do not feed into `pass`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mechanism_id: MechanismId,
    pub repetitions: usize,
    pub seed: u64,
    pub thresholds: AuditThresholds,
    pub analytic_mse: f64,
    pub empirical_mse: f64,
    /// empirical / analytic; absent when the analytic MSE is zero.
    pub mse_ratio: Option<f64>,
    pub mse_pass: bool,
    pub mean_errors: Vec<f64>,
    pub mean_ci_halfwidths: Vec<f64>,
    pub max_abs_mean: f64,
    pub mean_pass: bool,
    pub covariance: Option<CovarianceCheck>,
    pub invariant_max_deviation: f64,
    pub invariant_tolerance: f64,
    pub invariant_pass: bool,
    pub gaussian_law: Option<KsCheck>,
    pub bias: Option<BiasRegression>,
    pub ratio_probe: Option<RatioProbeSummary>,
    pub per_run_errors: Option<Vec<Vec<f64>>>,
    pub pass: bool,
}

impl AuditReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report is plain data")
    }
}

/// Per-chunk accumulator. Merging two partials is associative in exact
/// arithmetic; the fixed merge tree makes it deterministic in floats too.
struct Partial {
    sum_e: DVector<f64>,
    sum_sq: DVector<f64>,
    outer: Option<DMatrix<f64>>,
    inv_max: f64,
    ks_samples: Vec<Vec<f64>>,
    per_run: Option<Vec<Vec<f64>>>,
}

impl Partial {
    fn zero(d: usize, covariance: bool, ks_dirs: usize, per_run: bool) -> Self {
        Partial {
            sum_e: DVector::zeros(d),
            sum_sq: DVector::zeros(d),
            outer: covariance.then(|| DMatrix::zeros(d, d)),
            inv_max: 0.0,
            ks_samples: vec![Vec::new(); ks_dirs],
            per_run: per_run.then(Vec::new),
        }
    }

    fn merge(mut self, other: Partial) -> Partial {
        self.sum_e += &other.sum_e;
        self.sum_sq += &other.sum_sq;
        if let (Some(a), Some(b)) = (self.outer.as_mut(), other.outer.as_ref()) {
            *a += b;
        }
        self.inv_max = self.inv_max.max(other.inv_max);
        for (mine, theirs) in self.ks_samples.iter_mut().zip(other.ks_samples) {
            mine.extend(theirs);
        }
        if let (Some(a), Some(b)) = (self.per_run.as_mut(), other.per_run) {
            a.extend(b);
        }
        self
    }
}

/// Pairwise merge with a shape fixed by the chunk count alone.
fn tree_merge(mut partials: Vec<Partial>) -> Partial {
    debug_assert!(!partials.is_empty());
    while partials.len() > 1 {
        let mut next = Vec::with_capacity(partials.len().div_ceil(2));
        let mut iter = partials.into_iter();
        while let Some(first) = iter.next() {
            match iter.next() {
                Some(second) => next.push(first.merge(second)),
                None => next.push(first),
            }
        }
        partials = next;
    }
    partials.pop().expect("non-empty partial list")
}

/// Run `R` releases and compare their empirical moments with the
/// mechanism's exact answers. Statistical misses set pass flags to false;
/// only configuration errors return `Err`.
pub fn run_moment_audit(config: &AuditConfig) -> Result<AuditReport> {
    let reps = config.repetitions;
    if reps < 2 {
        return Err(Error::TooFewUnits {
            got: reps,
            needed: 2,
        });
    }
    let prepared =
        PreparedMechanism::prepare(config.mechanism, config.query, config.system, config.scale)?;
    let q_out = config.query.evaluate(config.histogram)?;
    let targets = config.system.apply_constraints(&q_out)?;
    let d = q_out.len();
    let thresholds = config.thresholds;

    // The projected Gaussian's law along any unit null direction v is
    // exactly N(0, sigma^2), a closed form worth testing. The directions
    // are the first null-basis columns; sigma is recovered from the
    // analytic MSE rather than re-deriving the calibration.
    let null_dim = config.system.null_dim();
    let sigma = (prepared.analytic_mse() / null_dim as f64).sqrt();
    let ks_directions: Vec<DVector<f64>> =
        if config.mechanism == MechanismId::ProjectedGaussian && sigma > 0.0 {
            (0..null_dim.min(3))
                .map(|k| config.system.q_null().column(k).into_owned())
                .collect()
        } else {
            Vec::new()
        };

    let n_chunks = reps.div_ceil(AUDIT_CHUNK);
    let partials: Vec<Result<Partial>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * AUDIT_CHUNK;
            let hi = reps.min(lo + AUDIT_CHUNK);
            let mut p = Partial::zero(
                d,
                config.compute_covariance,
                ks_directions.len(),
                config.keep_per_run,
            );
            for rep in lo..hi {
                let noise = prepared.noise(NoiseSource::new(config.seed, rep as u64));
                let values = &q_out + &noise;
                let errors = &values - &q_out;
                let deviation = (config.system.apply_constraints(&values)? - &targets)
                    .abs()
                    .max();
                p.inv_max = p.inv_max.max(deviation);
                for i in 0..d {
                    p.sum_e[i] += errors[i];
                    p.sum_sq[i] += errors[i] * errors[i];
                }
                if let Some(outer) = p.outer.as_mut() {
                    outer.ger(1.0, &errors, &errors, 1.0);
                }
                for (k, v) in ks_directions.iter().enumerate() {
                    p.ks_samples[k].push(v.dot(&errors));
                }
                if let Some(runs) = p.per_run.as_mut() {
                    runs.push(errors.iter().copied().collect());
                }
            }
            Ok(p)
        })
        .collect();
    let partials: Vec<Partial> = partials.into_iter().collect::<Result<_>>()?;
    let total = tree_merge(partials);

    let r_f = reps as f64;
    let mean_errors: Vec<f64> = total.sum_e.iter().map(|s| s / r_f).collect();
    let mean_ci_halfwidths: Vec<f64> = (0..d)
        .map(|i| {
            let var =
                ((total.sum_sq[i] - total.sum_e[i] * total.sum_e[i] / r_f) / (r_f - 1.0)).max(0.0);
            thresholds.mean_guard * var.sqrt() / r_f.sqrt()
        })
        .collect();
    let mean_pass = mean_errors
        .iter()
        .zip(&mean_ci_halfwidths)
        .all(|(m, hw)| m.abs() <= *hw);
    let max_abs_mean = mean_errors.iter().fold(0.0_f64, |a, m| a.max(m.abs()));

    let analytic_mse = prepared.analytic_mse();
    let empirical_mse = total.sum_sq.sum() / r_f;
    let (mse_ratio, mse_pass) = if analytic_mse == 0.0 {
        (None, empirical_mse == 0.0)
    } else {
        let ratio = empirical_mse / analytic_mse;
        (Some(ratio), (ratio - 1.0).abs() <= thresholds.mse_rel_tol)
    };

    let covariance = total.outer.as_ref().map(|outer| {
        let expected = prepared.noise_covariance();
        let mut max_dev: f64 = 0.0;
        let mut v_max: f64 = 0.0;
        for i in 0..d {
            v_max = v_max.max(expected[(i, i)]);
            for j in 0..d {
                max_dev = max_dev.max((outer[(i, j)] / r_f - expected[(i, j)]).abs());
            }
        }
        // Entrywise sampling std of the empirical second moment is at most
        // v_max * sqrt(kappa / R): kappa = 2 for the Gaussian family, and 6
        // covers the Laplace fourth moment (kurtosis 6).
        let kappa = if config.mechanism.is_gaussian_family() {
            2.0
        } else {
            6.0
        };
        let threshold = thresholds.cov_guard * v_max * (kappa / r_f).sqrt();
        CovarianceCheck {
            max_abs_deviation: max_dev,
            threshold,
            pass: max_dev <= threshold,
        }
    });

    let gaussian_law = if ks_directions.is_empty() {
        None
    } else {
        let reference = Normal::new(0.0, sigma).expect("sigma > 0 checked above");
        let mut statistics = Vec::with_capacity(ks_directions.len());
        let mut p_values = Vec::with_capacity(ks_directions.len());
        for samples in &total.ks_samples {
            let mut sorted = samples.clone();
            sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite samples"));
            let n = sorted.len() as f64;
            let mut d_stat: f64 = 0.0;
            for (i, x) in sorted.iter().enumerate() {
                let f = reference.cdf(*x);
                d_stat = d_stat
                    .max((f - i as f64 / n).abs())
                    .max((f - (i as f64 + 1.0) / n).abs());
            }
            let scaled = d_stat * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
            statistics.push(d_stat);
            p_values.push(kolmogorov_sf(scaled));
        }
        let pass = p_values.iter().all(|p| *p > thresholds.ks_alpha);
        Some(KsCheck {
            directions: ks_directions.len(),
            statistics,
            p_values,
            alpha: thresholds.ks_alpha,
            pass,
        })
    };

    let invariant_tolerance = config.system.release_tolerance(&q_out);
    let invariant_pass = total.inv_max <= invariant_tolerance;
    let pass = mse_pass
        && mean_pass
        && invariant_pass
        && covariance.as_ref().is_none_or(|c| c.pass)
        && gaussian_law.as_ref().is_none_or(|k| k.pass);

    Ok(AuditReport {
        mechanism_id: config.mechanism,
        repetitions: reps,
        seed: config.seed,
        thresholds,
        analytic_mse,
        empirical_mse,
        mse_ratio,
        mse_pass,
        mean_errors,
        mean_ci_halfwidths,
        max_abs_mean,
        mean_pass,
        covariance,
        invariant_max_deviation: total.inv_max,
        invariant_tolerance,
        invariant_pass,
        gaussian_law,
        bias: None,
        ratio_probe: None,
        per_run_errors: total.per_run,
        pass,
    })
}

/// Survival function of the Kolmogorov distribution,
/// Q(x) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 x^2).
fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.2 {
        // The alternating series needs many terms here and the answer is 1
        // to ten digits anyway.
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-14 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// OLS of per-unit release errors against the natural log of the true
/// values. An unbiased mechanism has slope 0 regardless of unit size; a
/// negative slope is the signature of post-processing that steals mass
/// from small units.
pub fn bias_regression(true_values: &[f64], errors: &[f64]) -> Result<BiasRegression> {
    if true_values.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            what: "bias regression inputs",
            expected: true_values.len(),
            got: errors.len(),
        });
    }
    let n = true_values.len();
    if n < 5 {
        return Err(Error::TooFewUnits { got: n, needed: 5 });
    }
    if true_values.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::NonFiniteInput(
            "bias regression needs positive finite true values",
        ));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFiniteInput("bias regression errors"));
    }
    let xs: Vec<f64> = true_values.iter().map(|t| t.ln()).collect();
    let n_f = n as f64;
    let x_bar = xs.iter().sum::<f64>() / n_f;
    let y_bar = errors.iter().sum::<f64>() / n_f;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(errors) {
        sxx += (x - x_bar) * (x - x_bar);
        sxy += (x - x_bar) * (y - y_bar);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateRegressor);
    }
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let sse: f64 = xs
        .iter()
        .zip(errors)
        .map(|(x, y)| {
            let fit = intercept + slope * x;
            (y - fit) * (y - fit)
        })
        .sum();
    let dof = n_f - 2.0;
    let std_error = (sse / dof / sxx).sqrt();
    let p_value = if std_error == 0.0 {
        if slope == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = slope / std_error;
        let dist = StudentsT::new(0.0, 1.0, dof).expect("dof >= 3");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(BiasRegression {
        slope,
        intercept,
        std_error,
        p_value,
        units: n,
    })
}

/// Score a family of regressions: count significant negative slopes at
/// level `alpha` and compare the count against Binomial(n, alpha/2). The
/// batch passes while the exceedance probability stays above
/// `exceedance_threshold`.
pub fn batch_bias_summary(
    fits: &[BiasRegression],
    alpha: f64,
    exceedance_threshold: f64,
) -> Result<BatchBiasSummary> {
    if fits.is_empty() {
        return Err(Error::EmptyInput("bias regression batch"));
    }
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::InvalidBudget(format!(
            "significance level must lie in (0, 1), got {alpha}"
        )));
    }
    let significant_negative = fits
        .iter()
        .filter(|f| f.slope < 0.0 && f.p_value < alpha)
        .count();
    let dist = Binomial::new(alpha / 2.0, fits.len() as u64).expect("valid binomial");
    let exceedance_p = if significant_negative == 0 {
        1.0
    } else {
        dist.sf((significant_negative - 1) as u64)
    };
    Ok(BatchBiasSummary {
        regressions: fits.len(),
        alpha,
        significant_negative,
        exceedance_p,
        exceedance_threshold,
        pass: exceedance_p > exceedance_threshold,
    })
}

/// Binned empirical likelihood-ratio probe for a mechanism with a
/// one-dimensional null space.
///
/// The released vector is projected onto the single null direction, giving
/// a scalar law per database. Both laws are sampled `reps_per_side` times
/// (disjoint stream ranges of one seed), histogrammed over the pooled
/// central 99% range, and every bin where both sides collected at least
/// `min_hits` must satisfy `|ln(k / k')| <= epsilon + 3 sqrt(1/k + 1/k')`,
/// the privacy bound plus three binomial standard deviations.
#[allow(clippy::too_many_arguments)]
pub fn ratio_probe(
    mechanism: MechanismId,
    query: &LinearQuery,
    h: &Histogram,
    h_prime: &Histogram,
    sys: &InvariantSystem,
    scale: NoiseScale,
    bins: usize,
    reps_per_side: usize,
    seed: u64,
    min_hits: usize,
) -> Result<RatioProbeSummary> {
    let budget = scale.budget().ok_or_else(|| {
        Error::InvalidBudget("the ratio probe needs an explicit privacy budget".into())
    })?;
    if sys.null_dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "ratio probe null-space dimension",
            expected: 1,
            got: sys.null_dim(),
        });
    }
    if bins == 0 {
        return Err(Error::EmptyInput("ratio probe bins"));
    }
    if reps_per_side < 2 {
        return Err(Error::TooFewUnits {
            got: reps_per_side,
            needed: 2,
        });
    }
    let prepared = PreparedMechanism::prepare(mechanism, query, sys, scale)?;
    let out_a = query.evaluate(h)?;
    let out_b = query.evaluate(h_prime)?;
    let direction = sys.q_null().column(0).into_owned();

    let reps = reps_per_side;
    let sample = |center: &DVector<f64>, stream_base: usize| -> Vec<f64> {
        (0..reps)
            .map(|r| {
                let noise = prepared.noise(NoiseSource::new(seed, (stream_base + r) as u64));
                direction.dot(&(center + noise))
            })
            .collect()
    };
    let side_a = sample(&out_a, 0);
    let side_b = sample(&out_b, reps);

    let mut pooled: Vec<f64> = side_a.iter().chain(&side_b).copied().collect();
    pooled.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let quantile = |q: f64| -> f64 {
        let idx = ((pooled.len() - 1) as f64 * q).round() as usize;
        pooled[idx]
    };
    let lo = quantile(0.005);
    let hi = quantile(0.995);
    // Samples are finite (sorted above), so a plain comparison suffices.
    if hi <= lo {
        return Err(Error::InsufficientMass);
    }
    let width = (hi - lo) / bins as f64;
    let count = |samples: &[f64]| -> Vec<usize> {
        let mut counts = vec![0usize; bins];
        for s in samples {
            if *s < lo || *s > hi {
                continue;
            }
            let idx = (((s - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        counts
    };
    let counts_a = count(&side_a);
    let counts_b = count(&side_b);

    let mut qualified = 0usize;
    let mut max_log_ratio = 0.0_f64;
    let mut bound_at_max = f64::INFINITY;
    let mut pass = true;
    for (ka, kb) in counts_a.iter().zip(&counts_b) {
        if *ka < min_hits || *kb < min_hits {
            continue;
        }
        qualified += 1;
        let log_ratio = (*ka as f64 / *kb as f64).ln().abs();
        let slack = 3.0 * (1.0 / *ka as f64 + 1.0 / *kb as f64).sqrt();
        let bound = budget.epsilon + slack;
        if log_ratio > max_log_ratio {
            max_log_ratio = log_ratio;
            bound_at_max = bound;
        }
        if log_ratio > bound {
            pass = false;
        }
    }
    if qualified == 0 {
        return Err(Error::InsufficientMass);
    }
    if max_log_ratio == 0.0 {
        // All qualified bins matched exactly; record the tightest bound.
        bound_at_max = budget.epsilon + 3.0 * (2.0 / reps as f64).sqrt();
    }
    Ok(RatioProbeSummary {
        mechanism_id: mechanism,
        epsilon: budget.epsilon,
        reps_per_side: reps,
        bins,
        min_hits,
        qualified_bins: qualified,
        max_log_ratio,
        bound_at_max,
        pass,
    })
}
