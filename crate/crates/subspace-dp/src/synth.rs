//! Deterministic synthetic fixtures for desk-scale experiments.
//!
//! No real demonstration data ships with the crate; these generators
//! produce tables with the same shape and rough magnitudes so mechanisms
//! and audits can be exercised end to end. Everything is a pure function
//! of the seed.

use crate::noise::NoiseSource;
use crate::query::{Histogram, MarginalSpec, TableShape};

/// One synthetic state: a vector of county populations released under an
/// exact state-total invariant.
#[derive(Debug, Clone)]
pub struct CensusState {
    pub name: String,
    pub counties: Histogram,
}

/// 48 synthetic states. State 0 always has 102 counties (the batch's
/// designated large state); the rest draw between 6 and 110 counties.
/// County populations are log-uniform over [10^3, 10^7], rounded to whole
/// persons, so the batch spans four orders of magnitude the way real
/// county tables do.
pub fn census_fixture(seed: u64) -> Vec<CensusState> {
    let mut sampler = NoiseSource::new(seed, 0).sampler();
    let ln_lo = 1e3_f64.ln();
    let ln_hi = 1e7_f64.ln();
    (0..48)
        .map(|s| {
            let n = if s == 0 {
                102
            } else {
                6 + sampler.next_index(105)
            };
            let counts: Vec<f64> = (0..n)
                .map(|_| {
                    let u = sampler.next_uniform();
                    (ln_lo + u * (ln_hi - ln_lo)).exp().round()
                })
                .collect();
            CensusState {
                name: format!("state-{s:02}"),
                counties: Histogram::new(counts).expect("positive synthetic counts"),
            }
        })
        .collect()
}

/// A three-way occupancy table (group x hour x building) with the two
/// marginals that stay exact: hour-by-building person-hours (summing over
/// groups) and group-by-building person-hours (summing over hours).
#[derive(Debug, Clone)]
pub struct CampusFixture {
    pub shape: TableShape,
    pub histogram: Histogram,
    pub specs: Vec<MarginalSpec>,
}

/// 14 groups x 24 hours x 20 buildings, counts uniform in 0..300.
pub fn campus_fixture(seed: u64) -> CampusFixture {
    let shape = TableShape::new(
        vec![14, 24, 20],
        vec!["group".into(), "hour".into(), "building".into()],
    )
    .expect("static shape");
    let mut sampler = NoiseSource::new(seed, 1).sampler();
    let counts: Vec<f64> = (0..shape.size())
        .map(|_| sampler.next_index(300) as f64)
        .collect();
    let specs = vec![
        MarginalSpec::group_by(vec![1, 2], 3).expect("static spec"),
        MarginalSpec::group_by(vec![0, 2], 3).expect("static spec"),
    ];
    CampusFixture {
        shape,
        histogram: Histogram::new(counts).expect("finite synthetic counts"),
        specs,
    }
}
