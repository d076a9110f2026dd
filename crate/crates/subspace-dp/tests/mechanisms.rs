//! Cross-module statistical checks on the release mechanisms, run at
//! moderate repetition counts with fixed seeds.

use nalgebra::DMatrix;
use subspace_dp::{
    build_invariant_system, run_moment_audit, AuditConfig, CorrelatedNoise, Histogram,
    InvariantSystem, LinearQuery, MechanismId, NoiseScale, NoiseSource, PreparedMechanism,
    PrivacyBudget,
};

fn sum_system(n: usize) -> InvariantSystem {
    build_invariant_system(DMatrix::from_element(1, n, 1.0), None).unwrap()
}

fn scale_for(id: MechanismId) -> NoiseScale {
    if id.is_gaussian_family() {
        NoiseScale::Budget(PrivacyBudget::new(0.8, 1e-5).unwrap())
    } else {
        NoiseScale::Budget(PrivacyBudget::pure(0.8).unwrap())
    }
}

#[test]
fn every_mechanism_is_empirically_unbiased_and_invariant_exact() {
    let sys = sum_system(5);
    let query = LinearQuery::identity(5);
    let h = Histogram::new(vec![120.0, 45.0, 260.0, 8.0, 90.0]).unwrap();
    for id in MechanismId::RUNNABLE {
        let config = AuditConfig::new(id, &query, &h, &sys, scale_for(id), 20_000, 11_000);
        let report = run_moment_audit(&config).unwrap();
        assert!(report.mean_pass, "{id}: {:?}", report.mean_errors);
        assert!(report.invariant_pass, "{id}");
        assert!(report.mse_pass, "{id}: ratio {:?}", report.mse_ratio);
    }
}

#[test]
fn empirical_mse_tracks_the_analytic_formula_for_all_mechanisms() {
    let sys = sum_system(4);
    let query = LinearQuery::new(
        DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.5, 0.0, 0.0, //
                0.0, 1.0, 0.5, 0.0, //
                0.0, 0.0, 1.0, 0.5, //
                0.5, 0.0, 0.0, 1.0,
            ],
        ),
        "banded",
    )
    .unwrap();
    let h = Histogram::new(vec![30.0, 70.0, 10.0, 50.0]).unwrap();
    for id in MechanismId::RUNNABLE {
        let config = AuditConfig::new(id, &query, &h, &sys, scale_for(id), 100_000, 12_000);
        let report = run_moment_audit(&config).unwrap();
        let ratio = report.mse_ratio.unwrap();
        assert!(
            (ratio - 1.0).abs() <= 0.05,
            "{id}: empirical/analytic {ratio}"
        );
    }
}

#[test]
fn subspace_correlated_noise_is_an_isometric_lift_of_its_null_form() {
    let sys = sum_system(6);
    let query = LinearQuery::identity(6);
    let budget = PrivacyBudget::new(1.0, 1e-4).unwrap();
    let prepared = PreparedMechanism::prepare(
        MechanismId::CorrelatedGaussian,
        &query,
        &sys,
        NoiseScale::Budget(budget),
    )
    .unwrap();
    let projected = query.projected_query(&sys).unwrap();
    let null_form = CorrelatedNoise::prepare(&projected, &budget).unwrap();
    for rep in 0..200u64 {
        let source = NoiseSource::new(3100, rep);
        let ambient = prepared.noise(source);
        let z = null_form.noise(source);
        // Same construction, so the lift must reproduce the rotation
        // exactly...
        let lifted = sys.q_null() * &z;
        assert_eq!(ambient, lifted, "rep {rep}");
        // ...and an orthonormal basis preserves the noise norm.
        let rel = (ambient.norm_squared() - z.norm_squared()).abs()
            / z.norm_squared().max(f64::MIN_POSITIVE);
        assert!(rel <= 1e-10, "rep {rep}: relative norm drift {rel}");
    }
}

#[test]
fn correlated_mechanism_mse_never_explodes_relative_to_projection() {
    // Not a theorem at these sizes, but the correlated shape should stay
    // within a small constant of the spherical projected mechanism on
    // well-conditioned random queries; a blowup means the decomposition
    // mis-measures the sensitivity body.
    let mut rng = NoiseSource::new(3200, 0).sampler();
    let budget = PrivacyBudget::new(1.0, 1e-4).unwrap();
    for trial in 0..20 {
        let n = 3 + rng.next_index(10);
        let c = DMatrix::from_fn(1, n, |_, _| 1.0 + rng.next_uniform());
        let sys = build_invariant_system(c, None).unwrap();
        let a = DMatrix::from_fn(n, n, |_, _| rng.next_gaussian(1.0));
        let query = LinearQuery::new(a, format!("t{trial}")).unwrap();
        let correlated = PreparedMechanism::prepare(
            MechanismId::CorrelatedGaussian,
            &query,
            &sys,
            NoiseScale::Budget(budget),
        )
        .unwrap();
        let projected = PreparedMechanism::prepare(
            MechanismId::ProjectedGaussian,
            &query,
            &sys,
            NoiseScale::Budget(budget),
        )
        .unwrap();
        let k = (1.0 + (n as f64).log2()).ceil();
        let ratio = correlated.analytic_mse() / projected.analytic_mse();
        assert!(
            ratio <= 4.0 * k,
            "trial {trial} (n={n}): correlated/projected MSE {ratio} vs k {k}"
        );
    }
}
