//! CSV ingestion and emission for labeled contingency tables.
//!
//! A table file is long form: one row per cell, one column per categorical
//! key and one numeric value column. Categories are discovered from the
//! data and ordered lexicographically per axis; absent combinations
//! densify to zero. Sanitized values are written with 17 significant
//! digits so a reload reproduces every f64 bit.

use std::collections::BTreeSet;
use std::path::Path;

use subspace_dp::{Histogram, MarginalSpec, TableShape};

use crate::{CliResult, Failure};

/// A dense labeled table. `values[flat]` follows the row-major layout of
/// `shape` (last key varies fastest); `categories[axis]` holds the sorted
/// labels of one key column.
pub struct Table {
    pub shape: TableShape,
    pub categories: Vec<Vec<String>>,
    pub key_names: Vec<String>,
    pub value_name: String,
    pub values: Vec<f64>,
}

impl Table {
    /// The table as a histogram; fails on negative cells, which input
    /// counts must not contain (sanitized reloads may).
    pub fn histogram(&self) -> CliResult<Histogram> {
        Histogram::new(self.values.clone())
            .map_err(|e| Failure::validation(format!("input table is not a valid histogram: {e}")))
    }
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> CliResult<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| {
            let available: Vec<&str> = headers.iter().map(str::trim).collect();
            Failure::validation(format!(
                "column {name:?} not found in {} (available: {})",
                path.display(),
                available.join(", ")
            ))
        })
}

/// Read a long-form CSV into a dense table. Values must be finite; sign is
/// not restricted here so sanitized outputs can be re-read.
pub fn load_table(path: &Path, keys: &[String], value: &str) -> CliResult<Table> {
    if keys.is_empty() {
        return Err(Failure::validation(
            "at least one --keys column is required",
        ));
    }
    {
        let mut sorted = keys.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != keys.len() {
            return Err(Failure::validation("--keys lists a column twice"));
        }
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Failure::validation(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Failure::validation(format!("cannot read {}: {e}", path.display())))?
        .clone();
    let key_cols: Vec<usize> = keys
        .iter()
        .map(|k| column_index(&headers, k, path))
        .collect::<CliResult<_>>()?;
    let value_col = column_index(&headers, value, path)?;

    let mut rows: Vec<(Vec<String>, f64)> = Vec::new();
    let mut category_sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); keys.len()];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        let mut key_values = Vec::with_capacity(keys.len());
        for (axis, &col) in key_cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(Failure::validation(format!(
                    "{} data row {}: empty value in key column {:?}",
                    path.display(),
                    line + 1,
                    keys[axis]
                )));
            }
            category_sets[axis].insert(raw.to_string());
            key_values.push(raw.to_string());
        }
        let raw_value = record.get(value_col).unwrap_or("").trim();
        let parsed: f64 = raw_value.parse().map_err(|_| {
            Failure::validation(format!(
                "{} data row {}: cannot parse {raw_value:?} in column {value:?} as a number",
                path.display(),
                line + 1
            ))
        })?;
        if !parsed.is_finite() {
            return Err(Failure::validation(format!(
                "{} data row {}: non-finite value in column {value:?}",
                path.display(),
                line + 1
            )));
        }
        rows.push((key_values, parsed));
    }
    if rows.is_empty() {
        return Err(Failure::validation(format!(
            "{} contains no data rows",
            path.display()
        )));
    }

    let categories: Vec<Vec<String>> = category_sets
        .into_iter()
        .map(|set| set.into_iter().collect())
        .collect();
    let dims: Vec<usize> = categories.iter().map(Vec::len).collect();
    let shape =
        TableShape::new(dims, keys.to_vec()).map_err(|e| Failure::validation(e.to_string()))?;

    let mut values = vec![0.0f64; shape.size()];
    let mut seen = vec![false; shape.size()];
    for (key_values, parsed) in rows {
        let multi: Vec<usize> = key_values
            .iter()
            .zip(&categories)
            .map(|(v, cats)| {
                cats.binary_search(v)
                    .expect("category discovered from the same rows")
            })
            .collect();
        let flat = shape
            .flat_index(&multi)
            .expect("coordinates derived from the shape");
        if seen[flat] {
            return Err(Failure::validation(format!(
                "duplicate key combination ({}) in {}",
                key_values.join(", "),
                path.display()
            )));
        }
        seen[flat] = true;
        values[flat] = parsed;
    }

    Ok(Table {
        shape,
        categories,
        key_names: keys.to_vec(),
        value_name: value.to_string(),
        values,
    })
}

/// Parse `exact-sum [group-by <axis>,<axis>,...]` clauses against the
/// table's axis names. A bare `exact-sum` keeps the grand total.
pub fn parse_invariants(clauses: &[String], shape: &TableShape) -> CliResult<Vec<MarginalSpec>> {
    if clauses.is_empty() {
        return Err(Failure::validation(
            "at least one --invariant clause is required",
        ));
    }
    let mut specs = Vec::with_capacity(clauses.len());
    for clause in clauses {
        let tokens: Vec<&str> = clause.split_whitespace().collect();
        if tokens.first().copied() != Some("exact-sum") {
            return Err(Failure::validation(format!(
                "invariant clause must start with \"exact-sum\", got {clause:?}"
            )));
        }
        let grouped: Vec<usize> = if tokens.len() == 1 {
            Vec::new()
        } else {
            if tokens[1] != "group-by" {
                return Err(Failure::validation(format!(
                    "expected \"group-by\" after \"exact-sum\" in {clause:?}"
                )));
            }
            let joined = tokens[2..].join("");
            if joined.is_empty() {
                return Err(Failure::validation(format!(
                    "\"group-by\" in {clause:?} names no axes; drop it to keep the grand total"
                )));
            }
            joined
                .split(',')
                .map(|name| {
                    let name = name.trim();
                    shape.axis_index(name).ok_or_else(|| {
                        Failure::validation(format!(
                            "unknown axis {name:?} in {clause:?} (available: {})",
                            shape.axis_names().join(", ")
                        ))
                    })
                })
                .collect::<CliResult<_>>()?
        };
        let spec = MarginalSpec::group_by(grouped, shape.n_axes())
            .map_err(|e| Failure::validation(format!("invalid clause {clause:?}: {e}")))?;
        specs.push(spec);
    }
    Ok(specs)
}

/// Write the table with `values` substituted for its cells, every
/// combination present, in flat row-major order. The `{:.16e}` format
/// carries 17 significant digits, enough to reproduce each f64 exactly.
pub fn write_table(path: &Path, table: &Table, values: &[f64]) -> CliResult<()> {
    assert_eq!(values.len(), table.shape.size());
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
    let mut header: Vec<&str> = table.key_names.iter().map(String::as_str).collect();
    header.push(&table.value_name);
    writer
        .write_record(&header)
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
    for (flat, value) in values.iter().enumerate() {
        let multi = table.shape.multi_index(flat);
        let mut record: Vec<String> = multi
            .iter()
            .zip(&table.categories)
            .map(|(&i, cats)| cats[i].clone())
            .collect();
        record.push(format!("{value:.16e}"));
        writer
            .write_record(&record)
            .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))
}

/// Read `(true, released)` columns for the external bias check.
pub fn load_pairs(path: &Path) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Failure::validation(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Failure::validation(format!("cannot read {}: {e}", path.display())))?
        .clone();
    let find = |name: &str| -> CliResult<usize> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Failure::validation(format!("column {name:?} not found in {}", path.display()))
            })
    };
    let true_col = find("true")?;
    let released_col = find("released")?;
    let mut truths = Vec::new();
    let mut released = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        let parse = |col: usize, name: &str| -> CliResult<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            raw.parse().map_err(|_| {
                Failure::validation(format!(
                    "{} data row {}: cannot parse {raw:?} in column {name:?} as a number",
                    path.display(),
                    line + 1
                ))
            })
        };
        truths.push(parse(true_col, "true")?);
        released.push(parse(released_col, "released")?);
    }
    Ok((truths, released))
}
