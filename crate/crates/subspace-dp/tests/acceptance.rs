//! End-to-end acceptance checks. Each test covers one numbered criterion,
//! prints a `criterion N: PASS|FAIL` line with its key numbers (visible
//! with `--nocapture`, or automatically when a test fails), and then
//! asserts. Statistical checks run on fixed seeds chosen ahead of time, so
//! every run is a deterministic replay.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use subspace_dp::distributed::centralized_reference;
use subspace_dp::{
    aggregate, batch_bias_summary, bias_regression, build_invariant_system,
    build_marginal_invariants, campus_fixture, census_fixture, mvee_symmetric, projected_laplace,
    ratio_probe, run_distributed, run_moment_audit, simulate_agents, AuditConfig, CorrelatedNoise,
    Error, Histogram, InvariantSystem, LinearQuery, MechanismId, NoiseScale, NoiseSource,
    Partition, PreparedMechanism, PrivacyBudget,
};

fn sum_system(n: usize) -> InvariantSystem {
    build_invariant_system(DMatrix::from_element(1, n, 1.0), None).unwrap()
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[test]
fn criterion_01_invariant_exactness() {
    let start = Instant::now();
    let mut rng = NoiseSource::new(1001, 0).sampler();
    let mut worst_ratio = 0.0_f64;
    for trial in 0..200usize {
        let n = 2 + rng.next_index(99);
        let max_nc = 20.min(n - 1);
        let n_c = 1 + rng.next_index(max_nc);
        let c = DMatrix::from_fn(n_c, n, |_, _| rng.next_gaussian(1.0));
        let sys = build_invariant_system(c, None).unwrap();
        let query = LinearQuery::identity(n);
        let counts: Vec<f64> = (0..n).map(|_| rng.next_index(1000) as f64).collect();
        let h = Histogram::new(counts).unwrap();
        let mechanism = MechanismId::RUNNABLE[trial % MechanismId::RUNNABLE.len()];
        let scale = if mechanism.is_gaussian_family() {
            NoiseScale::Budget(PrivacyBudget::new(0.2 + rng.next_uniform(), 1e-6).unwrap())
        } else {
            NoiseScale::Budget(PrivacyBudget::pure(0.2 + rng.next_uniform()).unwrap())
        };
        // A loose ellipsoid tolerance keeps the correlated runs inside the
        // time budget; the invariant holds for any decomposition because
        // the noise never leaves the null space.
        let prepared =
            PreparedMechanism::prepare_with(mechanism, &query, &sys, scale, 1e-3, None).unwrap();
        let release = prepared
            .release(&h, NoiseSource::new(7_000 + trial as u64, 0))
            .unwrap();
        let q_out = query.evaluate(&h).unwrap();
        let deviation = (sys.apply_constraints(release.values()).unwrap()
            - sys.apply_constraints(&q_out).unwrap())
        .abs()
        .max();
        let tolerance = sys.release_tolerance(&q_out);
        assert!(
            deviation <= tolerance,
            "trial {trial} ({mechanism}): deviation {deviation:e} > {tolerance:e}"
        );
        worst_ratio = worst_ratio.max(deviation / tolerance);
    }
    let elapsed = start.elapsed();
    let ok = elapsed < Duration::from_secs(30);
    println!(
        "criterion 1: {} (200 configurations, worst deviation/tolerance {:.3}, {:.1?})",
        if ok { "PASS" } else { "FAIL" },
        worst_ratio,
        elapsed
    );
    assert!(ok, "runtime {elapsed:?} exceeded 30 s");
}

#[test]
fn criterion_02_projected_gaussian_error_formula() {
    let start = Instant::now();
    let sys = sum_system(4);
    // Columns of I/sqrt(2) are 1 apart in L2 under row replacement, so the
    // calibration is sigma = c(1, e^-3) = 3 and the error formula gives
    // (4 - 1) * 9 * 1 = 27.
    let query =
        LinearQuery::new(DMatrix::identity(4, 4) / 2.0_f64.sqrt(), "half-identity").unwrap();
    let h = Histogram::new(vec![10.0, 20.0, 30.0, 40.0]).unwrap();
    let budget = PrivacyBudget::new(1.0, (-3.0_f64).exp()).unwrap();
    let config = AuditConfig::new(
        MechanismId::ProjectedGaussian,
        &query,
        &h,
        &sys,
        NoiseScale::Budget(budget),
        100_000,
        20_260_814,
    );
    let report = run_moment_audit(&config).unwrap();
    let ratio = report.mse_ratio.unwrap();
    let elapsed = start.elapsed();
    let ok = (report.analytic_mse - 27.0).abs() <= 1e-12 * 27.0
        && (ratio - 1.0).abs() <= 0.05
        && elapsed < Duration::from_secs(10);
    println!(
        "criterion 2: {} (analytic MSE {:.12}, empirical/analytic {:.4}, {:.1?})",
        if ok { "PASS" } else { "FAIL" },
        report.analytic_mse,
        ratio,
        elapsed
    );
    assert!((report.analytic_mse - 27.0).abs() <= 1e-12 * 27.0);
    assert!((ratio - 1.0).abs() <= 0.05, "MSE ratio {ratio}");
    assert!(elapsed < Duration::from_secs(10), "runtime {elapsed:?}");
}

#[test]
fn criterion_03_extension_never_loses_to_projection() {
    let mut rng = NoiseSource::new(3003, 0).sampler();
    let budget = PrivacyBudget::new(1.0, 1e-4).unwrap();
    let mut violations = 0usize;
    for _ in 0..100 {
        let n = 3 + rng.next_index(18);
        let n_c = 1 + rng.next_index(5.min(n - 1));
        let c = DMatrix::from_fn(n_c, n, |_, _| rng.next_gaussian(1.0));
        let sys = build_invariant_system(c, None).unwrap();
        let a = DMatrix::from_fn(n, n, |_, _| rng.next_gaussian(1.0));
        let query = LinearQuery::new(a, "random").unwrap();
        let scale = NoiseScale::Budget(budget);
        let projected =
            PreparedMechanism::prepare(MechanismId::ProjectedGaussian, &query, &sys, scale)
                .unwrap();
        let extended =
            PreparedMechanism::prepare(MechanismId::ExtendedGaussian, &query, &sys, scale).unwrap();
        if extended.analytic_mse() > projected.analytic_mse() * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    println!(
        "criterion 3: {} ({violations} violations out of 100 queries)",
        if violations == 0 { "PASS" } else { "FAIL" }
    );
    assert_eq!(violations, 0);
}

#[test]
fn criterion_04_census_scale_unbiasedness() {
    let states = census_fixture(4242);
    let budget = PrivacyBudget::pure(0.192).unwrap();

    // Large state: per-county mean error over 10^4 runs, CI guard 5.
    let state0 = &states[0];
    assert_eq!(state0.counties.d(), 102);
    let sys0 = sum_system(102);
    let query0 = LinearQuery::identity(102);
    let config = AuditConfig::new(
        MechanismId::ProjectedLaplace,
        &query0,
        &state0.counties,
        &sys0,
        NoiseScale::Budget(budget),
        10_000,
        814,
    );
    let report = run_moment_audit(&config).unwrap();

    // Slope of the per-county mean errors against log population.
    let truths: Vec<f64> = state0.counties.counts().iter().copied().collect();
    let fit = bias_regression(&truths, &report.mean_errors).unwrap();
    let (ci_lo, ci_hi) = fit.slope_ci(0.01);
    let ci_contains_zero = ci_lo <= 0.0 && 0.0 <= ci_hi;

    // Batch contrast: one single-release regression per state, scored
    // against the nominal false-positive rate at alpha = 0.01.
    let fits: Vec<_> = states
        .iter()
        .enumerate()
        .map(|(s, state)| {
            let n = state.counties.d();
            let sys = sum_system(n);
            let query = LinearQuery::identity(n);
            let release = projected_laplace(
                &query,
                &state.counties,
                &sys,
                &budget,
                NoiseSource::new(4848, s as u64),
            )
            .unwrap();
            let truth: Vec<f64> = state.counties.counts().iter().copied().collect();
            let errors: Vec<f64> = release
                .values()
                .iter()
                .zip(&truth)
                .map(|(y, t)| y - t)
                .collect();
            bias_regression(&truth, &errors).unwrap()
        })
        .collect();
    let batch = batch_bias_summary(&fits, 0.01, 0.01).unwrap();

    let ok = report.mean_pass && ci_contains_zero && batch.pass;
    println!(
        "criterion 4: {} (max |mean error| {:.4}, slope CI [{:.5}, {:.5}], \
         {} of 48 significant-negative slopes, exceedance p {:.4})",
        if ok { "PASS" } else { "FAIL" },
        report.max_abs_mean,
        ci_lo,
        ci_hi,
        batch.significant_negative,
        batch.exceedance_p
    );
    assert!(report.mean_pass, "a county mean left its 5 std/100 band");
    assert!(ci_contains_zero, "slope CI [{ci_lo}, {ci_hi}]");
    assert!(batch.pass, "{batch:?}");
}

#[test]
fn criterion_05_conditioning_equivalence() {
    let sys = sum_system(4);
    let query = LinearQuery::identity(4);
    let h = Histogram::new(vec![10.0, 20.0, 30.0, 40.0]).unwrap();
    let mut config = AuditConfig::new(
        MechanismId::ProjectedGaussian,
        &query,
        &h,
        &sys,
        NoiseScale::Fixed(1.0),
        100_000,
        5555,
    );
    config.compute_covariance = true;
    let report = run_moment_audit(&config).unwrap();
    let cov = report.covariance.unwrap();
    let gram_dev = sys.verify_conditioning_identity().unwrap();
    let ok = cov.max_abs_deviation <= 0.02 && gram_dev <= 1e-12;
    println!(
        "criterion 5: {} (covariance max deviation {:.4}, projector identity {:.2e})",
        if ok { "PASS" } else { "FAIL" },
        cov.max_abs_deviation,
        gram_dev
    );
    assert!(
        cov.max_abs_deviation <= 0.02,
        "empirical covariance strayed {} from the null projector",
        cov.max_abs_deviation
    );
    assert!(gram_dev <= 1e-12, "projector Gram identity {gram_dev:e}");
}

#[test]
fn criterion_06_table_scale_reproduction() {
    let start = Instant::now();
    let fixture = campus_fixture(20_260_814);
    let sys = build_marginal_invariants(&fixture.shape, &fixture.specs, None).unwrap();
    let rank_ok = sys.n_c() == 740;

    let n = sys.n();
    let q_null = sys.q_null();
    let analytic_stds: Vec<f64> = (0..n).map(|i| q_null.row(i).norm()).collect();
    let analytic_median = median(analytic_stds);

    let query = LinearQuery::identity(n);
    let prepared = PreparedMechanism::prepare(
        MechanismId::ProjectedGaussian,
        &query,
        &sys,
        NoiseScale::Fixed(1.0),
    )
    .unwrap();
    let reps = 50usize;
    let mut sum = vec![0.0_f64; n];
    let mut sum_sq = vec![0.0_f64; n];
    for rep in 0..reps {
        let noise = prepared.noise(NoiseSource::new(6001, rep as u64));
        for i in 0..n {
            sum[i] += noise[i];
            sum_sq[i] += noise[i] * noise[i];
        }
    }
    let r_f = reps as f64;
    let empirical_stds: Vec<f64> = (0..n)
        .map(|i| (((sum_sq[i] - sum[i] * sum[i] / r_f) / (r_f - 1.0)).max(0.0)).sqrt())
        .collect();
    let empirical_median = median(empirical_stds);
    let elapsed = start.elapsed();

    let empirical_ok = (empirical_median - analytic_median).abs() <= 0.02;
    let runtime_ok = elapsed < Duration::from_secs(300);
    let band_ok = (0.85..=0.92).contains(&analytic_median);
    let ok = rank_ok && empirical_ok && runtime_ok && band_ok;

    println!(
        "criterion 6: {} (rank {}, analytic median std {:.6}, empirical {:.6}, {:.1?})",
        if ok { "PASS" } else { "FAIL" },
        sys.n_c(),
        analytic_median,
        empirical_median,
        elapsed
    );
    if !band_ok {
        // Both fixed marginals treat the 20 buildings independently, and
        // inside one building every cell of the 14 x 24 slice has the same
        // null-projector diagonal: 1 - 1/14 - 1/24 + 1/336 = 299/336 =
        // 0.889881. The elementwise error std at sigma = 1 is its square
        // root, 0.943335, for every cell, so the median std cannot fall in
        // [0.85, 0.92]; that band brackets the variance figure instead.
        // The empirical estimate above confirms the 0.9433 value, so the
        // mechanism is behaving exactly as designed and the band itself is
        // the inconsistent reference point.
        println!(
            "criterion 6: analytic median std {:.6} = sqrt({:.6}); \
             expected band [0.85, 0.92] matches the variance, not the std",
            analytic_median,
            analytic_median * analytic_median
        );
    }
    assert!(rank_ok, "constraint rank {} != 740", sys.n_c());
    assert!(
        empirical_ok,
        "empirical median {empirical_median} vs analytic {analytic_median}"
    );
    assert!(runtime_ok, "runtime {elapsed:?} exceeded 5 min");
    assert!(
        band_ok,
        "analytic median std {analytic_median:.6} outside [0.85, 0.92] \
         (the band tracks the variance 0.8899, not the std 0.9433; see stdout)"
    );
}

#[test]
fn criterion_07_ellipsoid_certificates() {
    // Symmetrized unit directions: the enclosing ellipsoid is the unit
    // ball.
    let axes = mvee_symmetric(&DMatrix::identity(4, 4), 1e-9, 1_000_000).unwrap();
    let mut max_dev_identity = 0.0_f64;
    for i in 0..4 {
        for j in 0..4 {
            let id = if i == j { 1.0 } else { 0.0 };
            max_dev_identity = max_dev_identity.max((axes.f_matrix()[(i, j)] - id).abs());
        }
    }

    // Axis-aligned rectangle corners +-(2, 0), +-(0, 1): F = diag(2, 1).
    let rect = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
    let factor = mvee_symmetric(&rect, 1e-9, 1_000_000).unwrap();
    let max_dev_diag = [
        (factor.f_matrix()[(0, 0)] - 2.0).abs(),
        factor.f_matrix()[(0, 1)].abs(),
        factor.f_matrix()[(1, 0)].abs(),
        (factor.f_matrix()[(1, 1)] - 1.0).abs(),
    ]
    .into_iter()
    .fold(0.0_f64, f64::max);

    // Dual certificate on random instances.
    let mut rng = NoiseSource::new(7007, 0).sampler();
    let mut worst_residual = 0.0_f64;
    for _ in 0..20 {
        let d = 2 + rng.next_index(7);
        let m = d + 1 + rng.next_index(12);
        let points = DMatrix::from_fn(d, m, |_, _| rng.next_gaussian(1.0));
        let factor = mvee_symmetric(&points, 1e-9, 2_000_000).unwrap();
        worst_residual = worst_residual.max(factor.john_residual(&points).unwrap());
    }

    let ok = max_dev_identity <= 1e-4 && max_dev_diag <= 1e-4 && worst_residual < 1e-5;
    println!(
        "criterion 7: {} (identity dev {:.2e}, diagonal dev {:.2e}, worst residual {:.2e})",
        if ok { "PASS" } else { "FAIL" },
        max_dev_identity,
        max_dev_diag,
        worst_residual
    );
    assert!(max_dev_identity <= 1e-4);
    assert!(max_dev_diag <= 1e-4);
    assert!(worst_residual < 1e-5);
}

#[test]
fn criterion_08_correlated_mse_formula() {
    let budget = PrivacyBudget::new(1.0, 1e-4).unwrap();
    let mut rng = NoiseSource::new(8008, 0).sampler();
    let mut worst = 0.0_f64;
    for n in [2usize, 4, 8] {
        let a = DMatrix::from_fn(n, n, |_, _| rng.next_gaussian(1.0));
        let query = LinearQuery::new(a, format!("random-{n}")).unwrap();
        let noise = CorrelatedNoise::prepare(&query, &budget).unwrap();
        let analytic = noise.analytic_mse();
        let reps = 100_000usize;
        let mut acc = 0.0_f64;
        for rep in 0..reps {
            acc += noise
                .noise(NoiseSource::new(8100 + n as u64, rep as u64))
                .norm_squared();
        }
        let empirical = acc / reps as f64;
        let rel = (empirical / analytic - 1.0).abs();
        worst = worst.max(rel);
    }
    let ok = worst <= 0.05;
    println!(
        "criterion 8: {} (worst relative MSE error {:.4} over n in {{2, 4, 8}})",
        if ok { "PASS" } else { "FAIL" },
        worst
    );
    assert!(ok, "worst relative error {worst}");
}

#[test]
fn criterion_09_distributed_bit_exactness() {
    let mut rng = NoiseSource::new(9009, 0).sampler();
    let mut fault_detected = 0usize;
    for trial in 0..50usize {
        let n = 2 + rng.next_index(30);
        // At least two agents: digest comparison needs a peer to disagree
        // with, so a seed fault in a one-agent fleet is undetectable (the
        // one-agent case itself is covered by the library's unit tests).
        let m = 2 + rng.next_index(n - 1);
        let partition = Partition::contiguous(n, m).unwrap();
        let n_c = 1 + rng.next_index(4.min(n - 1));
        let c = DMatrix::from_fn(n_c, n, |_, _| rng.next_gaussian(1.0));
        let sys = build_invariant_system(c, None).unwrap();
        let counts: Vec<f64> = (0..n).map(|_| rng.next_index(500) as f64).collect();
        let h = Histogram::new(counts).unwrap();
        let mechanism = MechanismId::RUNNABLE[trial % MechanismId::RUNNABLE.len()];
        let scale = if mechanism.is_gaussian_family() {
            NoiseScale::Budget(PrivacyBudget::new(0.5, 1e-5).unwrap())
        } else {
            NoiseScale::Budget(PrivacyBudget::pure(0.7).unwrap())
        };
        let seed = 90_000 + trial as u64;

        let (values, _) = run_distributed(&h, &sys, mechanism, scale, seed, &partition).unwrap();
        let central = centralized_reference(&h, &sys, mechanism, scale, seed).unwrap();
        for i in 0..n {
            assert_eq!(
                values[i].to_bits(),
                central[i].to_bits(),
                "trial {trial} ({mechanism}), coordinate {i}"
            );
        }

        let faulty = rng.next_index(m) as u64;
        let reports =
            simulate_agents(&h, &sys, mechanism, scale, seed, &partition, &[faulty]).unwrap();
        match aggregate(&reports, &partition) {
            Err(Error::DigestMismatch { .. }) => fault_detected += 1,
            other => panic!("trial {trial}: fault not detected, got {other:?}"),
        }
    }
    println!("criterion 9: PASS (50 bitwise matches, {fault_detected}/50 faults detected)");
    assert_eq!(fault_detected, 50);
}

#[test]
fn criterion_10_pure_dp_ratio_probe() {
    let sys = sum_system(2);
    let query = LinearQuery::identity(2);
    let h = Histogram::new(vec![40.0, 60.0]).unwrap();
    let h_prime = Histogram::new(vec![41.0, 60.0]).unwrap();
    let summary = ratio_probe(
        MechanismId::ProjectedLaplace,
        &query,
        &h,
        &h_prime,
        &sys,
        NoiseScale::Budget(PrivacyBudget::pure(1.0).unwrap()),
        40,
        200_000,
        1010,
        500,
    )
    .unwrap();
    println!(
        "criterion 10: {} (max log-ratio {:.4}, bound at max {:.4}, {} qualified bins)",
        if summary.pass { "PASS" } else { "FAIL" },
        summary.max_log_ratio,
        summary.bound_at_max,
        summary.qualified_bins
    );
    assert!(summary.pass, "{summary:?}");
}
