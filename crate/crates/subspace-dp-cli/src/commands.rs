//! Command implementations. Each returns `Ok(())` or a [`Failure`] whose
//! code becomes the process exit status; statistical verdicts (an audit
//! that measures bias, say) are reported on stdout and never change the
//! exit code, which only reflects whether the command itself ran.

use std::path::Path;

use nalgebra::DVector;
use subspace_dp::{
    batch_bias_summary, bias_regression, build_marginal_invariants, ratio_probe, run_moment_audit,
    AgentReport, AuditConfig, AuditReport, Error, Histogram, InvariantSystem, LinearQuery,
    MechanismId, NoiseScale, NoiseSource, Partition, PreparedMechanism, PrivacyBudget,
};

use crate::dataset::{load_pairs, load_table, parse_invariants, write_table, Table};
use crate::{
    AuditArgs, CheckKind, CliResult, DataArgs, DemoArgs, DemoKind, DistributedArgs, Failure,
    ReleaseArgs,
};

fn pass_str(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn parse_mechanism(raw: &str) -> CliResult<MechanismId> {
    let id: MechanismId = raw
        .parse()
        .map_err(|e: Error| Failure::validation(e.to_string()))?;
    if id == MechanismId::Composed {
        return Err(Failure::validation(
            "\"composed\" releases are assembled from pure-DP components through the library \
             API and cannot be run directly",
        ));
    }
    Ok(id)
}

fn resolve_scale(
    id: MechanismId,
    epsilon: Option<f64>,
    delta: Option<f64>,
) -> CliResult<NoiseScale> {
    let epsilon = epsilon.ok_or_else(|| Failure::validation(format!("{id} requires --epsilon")))?;
    let budget = if id.is_gaussian_family() {
        let delta = delta.ok_or_else(|| {
            Failure::validation(format!(
                "{id} is an approximate-DP mechanism and requires --delta"
            ))
        })?;
        PrivacyBudget::new(epsilon, delta)
    } else {
        match delta {
            Some(delta) => PrivacyBudget::new(epsilon, delta),
            None => PrivacyBudget::pure(epsilon),
        }
    }
    .map_err(|e| Failure::validation(e.to_string()))?;
    Ok(NoiseScale::Budget(budget))
}

/// Load the table named by the shared flags and build its invariant
/// system.
fn prepared_table(data: &DataArgs) -> CliResult<(Table, InvariantSystem)> {
    let input = data
        .input
        .as_ref()
        .ok_or_else(|| Failure::validation("--input is required"))?;
    let value = data
        .value
        .as_ref()
        .ok_or_else(|| Failure::validation("--value is required"))?;
    let table = load_table(input, &data.keys, value)?;
    let specs = parse_invariants(&data.invariants, &table.shape)?;
    let sys = build_marginal_invariants(&table.shape, &specs, None)
        .map_err(|e| Failure::validation(e.to_string()))?;
    Ok((table, sys))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))
}

/// Composite label of one flat cell, axes joined with `/`.
fn cell_label(table: &Table, flat: usize) -> String {
    table
        .shape
        .multi_index(flat)
        .iter()
        .zip(&table.categories)
        .map(|(&i, cats)| cats[i].as_str())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn release(args: &ReleaseArgs) -> CliResult<()> {
    let (table, sys) = prepared_table(&args.data)?;
    let mechanism = parse_mechanism(&args.mechanism)?;
    let scale = resolve_scale(mechanism, args.epsilon, args.delta)?;
    let histogram = table.histogram()?;

    println!(
        "table: {} cells over axes {}",
        sys.n(),
        table.key_names.join(" x ")
    );
    println!(
        "constraint rank: {} ({} redundant rows dropped)",
        sys.n_c(),
        sys.redundant_rows()
    );

    let query = LinearQuery::identity(sys.n());
    let prepared = PreparedMechanism::prepare(mechanism, &query, &sys, scale)
        .map_err(|e| Failure::mechanism(e.to_string()))?;
    let released = prepared
        .release(&histogram, NoiseSource::new(args.seed, 0))
        .map_err(|e| Failure::mechanism(e.to_string()))?;
    println!(
        "mechanism: {mechanism}, seed: {}, analytic mse: {:.6}",
        args.seed,
        prepared.analytic_mse()
    );

    let mut values: Vec<f64> = released.values().iter().copied().collect();
    let mut clipped = 0usize;
    if args.clip_negative {
        for v in &mut values {
            if *v < 0.0 {
                *v = 0.0;
                clipped += 1;
            }
        }
        if clipped > 0 {
            eprintln!(
                "warning: UNBIASEDNESS-VOID: clipped {clipped} negative cells to zero; the \
                 published table is biased upward and the declared sums may no longer hold \
                 exactly"
            );
        }
    }

    let published = DVector::from_vec(values.clone());
    let achieved = sys
        .apply_constraints(&published)
        .map_err(|e| Failure::mechanism(e.to_string()))?;
    let deviation = (&achieved - released.constraint_targets()).abs().max();
    let tolerance = sys.release_tolerance(histogram.counts());
    println!(
        "invariant check: max deviation {deviation:.3e} (tolerance {tolerance:.3e}) -> {}",
        pass_str(deviation <= tolerance)
    );

    write_table(&args.out, &table, &values)?;
    println!("sanitized table written to {}", args.out.display());

    if let Some(report) = &args.report {
        let mut json = released.to_json();
        if args.clip_negative {
            json["values"] = serde_json::json!(values);
            json["clipped_cells"] = serde_json::json!(clipped);
        }
        write_json(report, &json)?;
        println!("release metadata written to {}", report.display());
    }

    // Reload what was just published and re-check the sums: proves the
    // textual encoding did not lose a bit.
    let reloaded = load_table(&args.out, &table.key_names, &table.value_name)?;
    let reloaded_values = DVector::from_vec(reloaded.values);
    let round_trip = (sys
        .apply_constraints(&reloaded_values)
        .map_err(|e| Failure::mechanism(e.to_string()))?
        - released.constraint_targets())
    .abs()
    .max();
    println!(
        "round-trip check: max deviation {round_trip:.3e} -> {}",
        pass_str(round_trip <= tolerance)
    );
    Ok(())
}

pub fn audit(args: &AuditArgs) -> CliResult<()> {
    match args.check {
        CheckKind::Moments | CheckKind::Mse => audit_moments(args),
        CheckKind::Bias => audit_bias(args),
        CheckKind::Ratio => audit_ratio(args),
    }
}

fn required_mechanism(args: &AuditArgs) -> CliResult<MechanismId> {
    let raw = args
        .mechanism
        .as_ref()
        .ok_or_else(|| Failure::validation("this check requires --mechanism"))?;
    parse_mechanism(raw)
}

fn map_audit_error(e: Error) -> Failure {
    match e {
        Error::TooFewUnits { .. } => Failure::validation(e.to_string()),
        other => Failure::mechanism(other.to_string()),
    }
}

fn print_moment_report(report: &AuditReport) {
    println!(
        "mechanism: {}, repetitions: {}, seed: {}",
        report.mechanism_id, report.repetitions, report.seed
    );
    match report.mse_ratio {
        Some(ratio) => println!(
            "mse: empirical {:.6} vs analytic {:.6} (ratio {:.4}) -> {}",
            report.empirical_mse,
            report.analytic_mse,
            ratio,
            pass_str(report.mse_pass)
        ),
        None => println!(
            "mse: empirical {:.6} vs analytic 0 -> {}",
            report.empirical_mse,
            pass_str(report.mse_pass)
        ),
    }
    println!(
        "mean errors: max |mean| {:.4e} -> {}",
        report.max_abs_mean,
        pass_str(report.mean_pass)
    );
    if let Some(cov) = &report.covariance {
        println!(
            "covariance: max deviation {:.4e} (threshold {:.4e}) -> {}",
            cov.max_abs_deviation,
            cov.threshold,
            pass_str(cov.pass)
        );
    }
    if let Some(ks) = &report.gaussian_law {
        let min_p = ks.p_values.iter().copied().fold(f64::INFINITY, f64::min);
        println!(
            "gaussian law: {} directions, min KS p-value {:.4} (alpha {}) -> {}",
            ks.directions,
            min_p,
            ks.alpha,
            pass_str(ks.pass)
        );
    }
    println!(
        "invariant: max deviation {:.3e} (tolerance {:.3e}) -> {}",
        report.invariant_max_deviation,
        report.invariant_tolerance,
        pass_str(report.invariant_pass)
    );
    println!("overall: {}", pass_str(report.pass));
}

fn audit_moments(args: &AuditArgs) -> CliResult<()> {
    let (table, sys) = prepared_table(&args.data)?;
    let mechanism = required_mechanism(args)?;
    let scale = resolve_scale(mechanism, args.epsilon, args.delta)?;
    let histogram = table.histogram()?;
    let query = LinearQuery::identity(sys.n());

    let mut config = AuditConfig::new(
        mechanism,
        &query,
        &histogram,
        &sys,
        scale,
        args.repetitions,
        args.seed,
    );
    config.compute_covariance = args.covariance;
    config.keep_per_run = args.per_run_out.is_some();
    let report = run_moment_audit(&config).map_err(map_audit_error)?;
    print_moment_report(&report);

    if let Some(path) = &args.report {
        write_json(path, &report.to_json())?;
        println!("audit report written to {}", path.display());
    }
    if let Some(path) = &args.per_run_out {
        let runs = report
            .per_run_errors
            .as_ref()
            .expect("keep_per_run was requested");
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
        let mut header = vec!["run".to_string()];
        header.extend((0..sys.n()).map(|flat| cell_label(&table, flat)));
        writer
            .write_record(&header)
            .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
        for (run, errors) in runs.iter().enumerate() {
            let mut record = vec![run.to_string()];
            record.extend(errors.iter().map(|e| format!("{e:.16e}")));
            writer.write_record(&record).map_err(|e| {
                Failure::validation(format!("cannot write {}: {e}", path.display()))
            })?;
        }
        writer
            .flush()
            .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
        println!("per-run errors written to {}", path.display());
    }
    Ok(())
}

fn audit_bias(args: &AuditArgs) -> CliResult<()> {
    // External-pairs mode: regress released - true from a file, no
    // mechanism involved.
    if let Some(pairs_path) = &args.pairs {
        let (truths, released) = load_pairs(pairs_path)?;
        let errors: Vec<f64> = released.iter().zip(&truths).map(|(r, t)| r - t).collect();
        let fit =
            bias_regression(&truths, &errors).map_err(|e| Failure::validation(e.to_string()))?;
        let (lo, hi) = fit.slope_ci(0.01);
        println!("units: {}", fit.units);
        println!(
            "slope of error vs ln(true): {:.6} (99% CI [{:.6}, {:.6}]), p-value {:.4}",
            fit.slope, lo, hi, fit.p_value
        );
        let biased = fit.slope < 0.0 && fit.p_value < 0.01;
        println!(
            "verdict: {}",
            if biased {
                "size-dependent bias detected (small units lose mass)"
            } else {
                "no size-dependent bias detected"
            }
        );
        if let Some(path) = &args.report {
            write_json(
                path,
                &serde_json::json!({
                    "check": "bias",
                    "mode": "pairs",
                    "units": fit.units,
                    "slope": fit.slope,
                    "intercept": fit.intercept,
                    "std_error": fit.std_error,
                    "p_value": fit.p_value,
                    "slope_ci_99": [lo, hi],
                    "biased": biased,
                }),
            )?;
            println!("audit report written to {}", path.display());
        }
        return Ok(());
    }

    let (table, sys) = prepared_table(&args.data)?;
    let mechanism = required_mechanism(args)?;
    let scale = resolve_scale(mechanism, args.epsilon, args.delta)?;
    let histogram = table.histogram()?;
    let query = LinearQuery::identity(sys.n());
    let prepared = PreparedMechanism::prepare(mechanism, &query, &sys, scale)
        .map_err(|e| Failure::mechanism(e.to_string()))?;

    // The fit is against ln(true), so zero cells cannot participate.
    let kept: Vec<usize> = (0..sys.n())
        .filter(|&i| histogram.counts()[i] > 0.0)
        .collect();
    if kept.len() < sys.n() {
        eprintln!(
            "note: {} zero cells excluded from the log-scale fit",
            sys.n() - kept.len()
        );
    }
    let truths: Vec<f64> = kept.iter().map(|&i| histogram.counts()[i]).collect();
    if args.repetitions == 0 {
        return Err(Failure::validation("--repetitions must be at least 1"));
    }

    let mut fits = Vec::with_capacity(args.repetitions);
    let mut mean_errors = vec![0.0f64; kept.len()];
    for rep in 0..args.repetitions {
        let noise = prepared.noise(NoiseSource::new(args.seed, rep as u64));
        let errors: Vec<f64> = kept.iter().map(|&i| noise[i]).collect();
        for (m, e) in mean_errors.iter_mut().zip(&errors) {
            *m += e / args.repetitions as f64;
        }
        fits.push(
            bias_regression(&truths, &errors).map_err(|e| Failure::validation(e.to_string()))?,
        );
    }
    let summary =
        batch_bias_summary(&fits, 0.01, 0.01).map_err(|e| Failure::validation(e.to_string()))?;
    println!(
        "mechanism: {mechanism}, releases: {}, units per release: {}",
        summary.regressions,
        kept.len()
    );
    println!(
        "significant negative slopes at alpha {}: {} of {} (exceedance p {:.4}) -> {}",
        summary.alpha,
        summary.significant_negative,
        summary.regressions,
        summary.exceedance_p,
        pass_str(summary.pass)
    );
    let mean_fit =
        bias_regression(&truths, &mean_errors).map_err(|e| Failure::validation(e.to_string()))?;
    let (lo, hi) = mean_fit.slope_ci(0.01);
    println!(
        "mean-error slope: {:.6} (99% CI [{:.6}, {:.6}]), p-value {:.4}",
        mean_fit.slope, lo, hi, mean_fit.p_value
    );

    if let Some(path) = &args.report {
        write_json(
            path,
            &serde_json::json!({
                "check": "bias",
                "mode": "mechanism",
                "mechanism_id": mechanism.as_str(),
                "seed": args.seed,
                "releases": summary.regressions,
                "units": kept.len(),
                "alpha": summary.alpha,
                "significant_negative": summary.significant_negative,
                "exceedance_p": summary.exceedance_p,
                "pass": summary.pass,
                "mean_error_slope": mean_fit.slope,
                "mean_error_slope_ci_99": [lo, hi],
                "mean_error_p_value": mean_fit.p_value,
            }),
        )?;
        println!("audit report written to {}", path.display());
    }
    Ok(())
}

fn audit_ratio(args: &AuditArgs) -> CliResult<()> {
    let (table, sys) = prepared_table(&args.data)?;
    let mechanism = required_mechanism(args)?;
    let scale = resolve_scale(mechanism, args.epsilon, args.delta)?;
    let histogram = table.histogram()?;
    if args.neighbor_cell >= sys.n() {
        return Err(Failure::validation(format!(
            "--neighbor-cell {} out of range for a table with {} cells",
            args.neighbor_cell,
            sys.n()
        )));
    }
    let mut neighbor = table.values.clone();
    neighbor[args.neighbor_cell] += 1.0;
    let h_prime = Histogram::new(neighbor).map_err(|e| Failure::validation(e.to_string()))?;
    let query = LinearQuery::identity(sys.n());

    let summary = ratio_probe(
        mechanism,
        &query,
        &histogram,
        &h_prime,
        &sys,
        scale,
        args.bins,
        args.repetitions,
        args.seed,
        args.min_hits,
    )
    .map_err(|e| match e {
        Error::InvalidBudget(_)
        | Error::DimensionMismatch { .. }
        | Error::TooFewUnits { .. }
        | Error::EmptyInput(_) => Failure::validation(e.to_string()),
        other => Failure::mechanism(other.to_string()),
    })?;

    println!(
        "mechanism: {} at epsilon {:.4}, neighbor cell {} ({})",
        summary.mechanism_id,
        summary.epsilon,
        args.neighbor_cell,
        cell_label(&table, args.neighbor_cell)
    );
    println!(
        "samples per side: {}, bins: {}, qualified: {} (min hits {})",
        summary.reps_per_side, summary.bins, summary.qualified_bins, summary.min_hits
    );
    println!(
        "max |log ratio|: {:.4} vs bound {:.4} -> {}",
        summary.max_log_ratio,
        summary.bound_at_max,
        pass_str(summary.pass)
    );
    if let Some(path) = &args.report {
        write_json(
            path,
            &serde_json::to_value(summary).expect("serializable summary"),
        )?;
        println!("audit report written to {}", path.display());
    }
    Ok(())
}

pub fn distributed(args: &DistributedArgs) -> CliResult<()> {
    let (table, sys) = prepared_table(&args.data)?;
    let mechanism = parse_mechanism(&args.mechanism)?;
    let scale = resolve_scale(mechanism, args.epsilon, args.delta)?;
    let histogram = table.histogram()?;
    let partition = Partition::contiguous(sys.n(), args.agents)
        .map_err(|e| Failure::validation(e.to_string()))?;
    let faults: Vec<u64> = match &args.inject_seed_fault {
        None => Vec::new(),
        Some(raw) => {
            let id = raw
                .strip_prefix("agent=")
                .and_then(|k| k.parse::<u64>().ok())
                .ok_or_else(|| {
                    Failure::validation(format!("--inject-seed-fault expects agent=K, got {raw:?}"))
                })?;
            if id >= partition.m() as u64 {
                return Err(Failure::validation(format!(
                    "fault target agent {id} does not exist in a {}-agent fleet",
                    partition.m()
                )));
            }
            vec![id]
        }
    };

    println!("constraint rank: {}", sys.n_c());
    println!("partition: {} agents over {} cells", partition.m(), sys.n());
    let reports = subspace_dp::simulate_agents(
        &histogram, &sys, mechanism, scale, args.seed, &partition, &faults,
    )
    .map_err(|e| Failure::mechanism(e.to_string()))?;
    for r in &reports {
        println!(
            "agent {}: cells [{}, {}), noise digest {:016x}",
            r.agent_id,
            r.start,
            r.start + r.len,
            r.noise_digest
        );
    }

    // Model the real flow: reports cross the wire as bytes and the
    // aggregator decodes them knowing only the partition and fleet seed.
    let wire: Vec<AgentReport> = reports
        .iter()
        .map(|r| AgentReport::decode(&r.encode(), &partition, args.seed))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::aggregate(e.to_string()))?;

    match subspace_dp::aggregate(&wire, &partition) {
        Ok(values) => {
            println!("digest comparison: all {} agents agree", partition.m());
            let centralized =
                subspace_dp::centralized_reference(&histogram, &sys, mechanism, scale, args.seed)
                    .map_err(|e| Failure::mechanism(e.to_string()))?;
            let bitwise = values.len() == centralized.len()
                && values
                    .iter()
                    .zip(centralized.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            println!(
                "centralized comparison: {}",
                if bitwise {
                    "MATCH (bitwise)"
                } else {
                    "MISMATCH"
                }
            );
            let check = subspace_dp::verify_aggregate(&values, &sys, &histogram)
                .map_err(|e| Failure::mechanism(e.to_string()))?;
            println!(
                "invariant check: max deviation {:.3e} (tolerance {:.3e}) -> {}",
                check.max_deviation,
                check.tolerance,
                pass_str(check.pass)
            );
            if !bitwise {
                return Err(Failure::aggregate(
                    "aggregate differs from the centralized reference",
                ));
            }
            if !check.pass {
                return Err(Failure::aggregate(
                    "aggregate violates the declared invariants",
                ));
            }
            if let Some(out) = &args.out {
                write_table(out, &table, values.as_slice())?;
                println!("aggregate table written to {}", out.display());
            }
            if let Some(path) = &args.report {
                let blocks: Vec<serde_json::Value> = wire
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "agent_id": r.agent_id,
                            "start": r.start,
                            "len": r.len,
                            "noise_digest": format!("{:016x}", r.noise_digest),
                        })
                    })
                    .collect();
                write_json(
                    path,
                    &serde_json::json!({
                        "mechanism_id": mechanism.as_str(),
                        "seed": args.seed,
                        "agents": partition.m(),
                        "blocks": blocks,
                        "values": values.iter().copied().collect::<Vec<f64>>(),
                    }),
                )?;
                println!("agent report written to {}", path.display());
            }
            Ok(())
        }
        Err(Error::DigestMismatch { agent_id }) => {
            println!("digest comparison: MISMATCH at agent {agent_id}");
            // Show what splicing the bad block in anyway would have done
            // to the invariants.
            if let Ok(spliced) = subspace_dp::assemble_unchecked(&wire, &partition) {
                if let Ok(check) = subspace_dp::verify_aggregate(&spliced, &sys, &histogram) {
                    println!(
                        "spliced anyway: invariant max deviation {:.3e} (tolerance {:.3e}) -> {}",
                        check.max_deviation,
                        check.tolerance,
                        pass_str(check.pass)
                    );
                }
            }
            Err(Failure::aggregate(format!(
                "agent {agent_id} noise digest disagrees with the fleet; aggregate rejected"
            )))
        }
        Err(other) => Err(Failure::aggregate(other.to_string())),
    }
}

pub fn demo(args: &DemoArgs) -> CliResult<()> {
    std::fs::create_dir_all(&args.out_dir).map_err(|e| {
        Failure::validation(format!("cannot create {}: {e}", args.out_dir.display()))
    })?;
    match args.which {
        DemoKind::Census => demo_census(args),
        DemoKind::Campus => demo_campus(args),
    }
}

fn write_input_csv(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
    writer
        .write_record(header)
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
    for row in rows {
        writer
            .write_record(&row)
            .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))
}

/// County populations of the designated large synthetic state, released
/// under an exact state total with pure-DP Laplace noise.
fn demo_census(args: &DemoArgs) -> CliResult<()> {
    let states = subspace_dp::census_fixture(args.seed);
    let state = &states[0];
    let input = args.out_dir.join("census-input.csv");
    write_input_csv(
        &input,
        &["county", "population"],
        state
            .counties
            .counts()
            .iter()
            .enumerate()
            .map(|(i, &pop)| vec![format!("county-{i:03}"), format!("{pop}")]),
    )?;
    println!(
        "synthetic input ({}, {} counties, total {}) written to {}",
        state.name,
        state.counties.d(),
        state.counties.total(),
        input.display()
    );
    release(&ReleaseArgs {
        data: DataArgs {
            input: Some(input),
            keys: vec!["county".into()],
            value: Some("population".into()),
            invariants: vec!["exact-sum".into()],
        },
        mechanism: "projected-laplace".into(),
        epsilon: Some(0.192),
        delta: None,
        seed: args.seed,
        out: args.out_dir.join("census-release.csv"),
        report: Some(args.out_dir.join("census-release.json")),
        clip_negative: false,
    })
}

/// The three-way occupancy table under its two exact marginals, released
/// with unit-scale projected Gaussian noise so the per-cell error moments
/// are directly comparable across cells.
fn demo_campus(args: &DemoArgs) -> CliResult<()> {
    let fixture = subspace_dp::campus_fixture(args.seed);
    let input = args.out_dir.join("campus-input.csv");
    let shape = &fixture.shape;
    write_input_csv(
        &input,
        &["group", "hour", "building", "count"],
        (0..shape.size()).map(|flat| {
            let multi = shape.multi_index(flat);
            vec![
                format!("g{:02}", multi[0]),
                format!("h{:02}", multi[1]),
                format!("b{:02}", multi[2]),
                format!("{}", fixture.histogram.counts()[flat]),
            ]
        }),
    )?;
    println!(
        "synthetic input (6720 cells) written to {}",
        input.display()
    );

    let keys = vec![
        "group".to_string(),
        "hour".to_string(),
        "building".to_string(),
    ];
    let table = load_table(&input, &keys, "count")?;
    let clauses = vec![
        "exact-sum group-by hour,building".to_string(),
        "exact-sum group-by group,building".to_string(),
    ];
    let specs = parse_invariants(&clauses, &table.shape)?;
    let sys = build_marginal_invariants(&table.shape, &specs, None)
        .map_err(|e| Failure::mechanism(e.to_string()))?;
    println!("constraint rank: {}", sys.n_c());

    let histogram = table.histogram()?;
    let query = LinearQuery::identity(sys.n());
    let prepared = PreparedMechanism::prepare(
        MechanismId::ProjectedGaussian,
        &query,
        &sys,
        NoiseScale::Fixed(1.0),
    )
    .map_err(|e| Failure::mechanism(e.to_string()))?;

    // Per-cell error std at unit noise scale: the projection leaves
    // variance 1 - ||row i of the row-space basis||^2 in cell i. Using the
    // thin row basis avoids materializing the full null basis.
    let q_row = sys.q_row();
    let mut stds: Vec<f64> = (0..sys.n())
        .map(|i| (1.0 - q_row.row(i).norm_squared()).max(0.0).sqrt())
        .collect();
    stds.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite stds"));
    let median = 0.5 * (stds[sys.n() / 2 - 1] + stds[sys.n() / 2]);
    println!("analytic per-cell error std at unit scale (median): {median:.6}");

    let released = prepared
        .release(&histogram, NoiseSource::new(args.seed, 0))
        .map_err(|e| Failure::mechanism(e.to_string()))?;
    let achieved = sys
        .apply_constraints(released.values())
        .map_err(|e| Failure::mechanism(e.to_string()))?;
    let deviation = (&achieved - released.constraint_targets()).abs().max();
    let tolerance = sys.release_tolerance(histogram.counts());
    println!(
        "invariant check: max deviation {deviation:.3e} (tolerance {tolerance:.3e}) -> {}",
        pass_str(deviation <= tolerance)
    );

    let out = args.out_dir.join("campus-release.csv");
    write_table(&out, &table, released.values().as_slice())?;
    println!("sanitized table written to {}", out.display());
    let report = args.out_dir.join("campus-release.json");
    write_json(&report, &released.to_json())?;
    println!("release metadata written to {}", report.display());
    Ok(())
}
