//! Data model: histograms over a discrete universe, linear queries on them,
//! multidimensional table shapes, and marginal-sum constraint construction.
//!
//! Neighboring databases are related by replacing one individual's record
//! (bounded neighboring): the histogram moves by e_z - e_z' for two universe
//! elements z != z'. Sensitivities below are defined against that relation,
//! so a query with a single universe column has sensitivity zero.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::invariant::{build_invariant_system, InvariantSystem};

/// Non-negative counts over d universe elements, optionally labeled.
#[derive(Debug, Clone)]
pub struct Histogram {
    counts: DVector<f64>,
    labels: Option<Vec<String>>,
}

impl Histogram {
    pub fn new(counts: Vec<f64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::EmptyInput("histogram"));
        }
        for (index, &value) in counts.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteInput("histogram counts"));
            }
            if value < 0.0 {
                return Err(Error::NegativeCount { index, value });
            }
        }
        Ok(Histogram {
            counts: DVector::from_vec(counts),
            labels: None,
        })
    }

    pub fn with_labels(counts: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != counts.len() {
            return Err(Error::DimensionMismatch {
                what: "histogram labels",
                expected: counts.len(),
                got: labels.len(),
            });
        }
        let mut h = Histogram::new(counts)?;
        h.labels = Some(labels);
        Ok(h)
    }

    pub fn d(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &DVector<f64> {
        &self.counts
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Total population N.
    pub fn total(&self) -> f64 {
        self.counts.sum()
    }
}

/// Which norm a sensitivity is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormOrder {
    L1,
    L2,
}

/// A linear query A: histograms in R^d to answers in R^n, stored as the
/// n x d matrix whose column a_z is the answer contribution of one
/// individual with record z.
#[derive(Debug, Clone)]
pub struct LinearQuery {
    matrix: DMatrix<f64>,
    name: String,
    sens_l1: OnceLock<f64>,
    sens_l2: OnceLock<f64>,
}

impl LinearQuery {
    pub fn new(matrix: DMatrix<f64>, name: impl Into<String>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::EmptyInput("query matrix"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("query matrix"));
        }
        Ok(LinearQuery {
            matrix,
            name: name.into(),
            sens_l1: OnceLock::new(),
            sens_l2: OnceLock::new(),
        })
    }

    /// Identity query: release the histogram itself.
    pub fn identity(d: usize) -> Self {
        LinearQuery::new(DMatrix::identity(d, d), "identity").expect("identity query is valid")
    }

    /// Total query: release the single number sum(h).
    pub fn total(d: usize) -> Self {
        LinearQuery::new(DMatrix::from_element(1, d, 1.0), "total").expect("total query is valid")
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn evaluate(&self, h: &Histogram) -> Result<DVector<f64>> {
        if h.d() != self.d() {
            return Err(Error::DimensionMismatch {
                what: "histogram for query evaluation",
                expected: self.d(),
                got: h.d(),
            });
        }
        Ok(&self.matrix * h.counts())
    }

    /// Worst-case change of the answer over one record replacement:
    /// max over pairs z != z' of ||a_z - a_z'||_p. Zero when d = 1, since a
    /// one-element universe admits no replacement. Cached after first use.
    pub fn l_p_sensitivity(&self, norm: NormOrder) -> f64 {
        let cell = match norm {
            NormOrder::L1 => &self.sens_l1,
            NormOrder::L2 => &self.sens_l2,
        };
        *cell.get_or_init(|| {
            let d = self.d();
            if d == 1 {
                return 0.0;
            }
            let mut worst: f64 = 0.0;
            for z in 0..d {
                for w in (z + 1)..d {
                    let diff = self.matrix.column(z) - self.matrix.column(w);
                    let val = match norm {
                        NormOrder::L1 => diff.iter().map(|v| v.abs()).sum(),
                        NormOrder::L2 => diff.norm(),
                    };
                    worst = worst.max(val);
                }
            }
            worst
        })
    }

    /// The query seen through the null space: Q_N^T A, an (n - n_c) x d
    /// query. Its sensitivity never exceeds the original's, which is what
    /// makes extension mechanisms competitive.
    pub fn projected_query(&self, sys: &InvariantSystem) -> Result<LinearQuery> {
        if sys.n() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "invariant system for query projection",
                expected: self.n(),
                got: sys.n(),
            });
        }
        let projected = sys.q_null().transpose() * &self.matrix;
        LinearQuery::new(projected, format!("{}#null", self.name))
    }
}

/// Shape of a multidimensional contingency table. Cells flatten row-major
/// in axis order: the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableShape {
    dims: Vec<usize>,
    axis_names: Vec<String>,
}

impl TableShape {
    pub fn new(dims: Vec<usize>, axis_names: Vec<String>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyInput("table shape"));
        }
        if dims.len() != axis_names.len() {
            return Err(Error::DimensionMismatch {
                what: "axis names",
                expected: dims.len(),
                got: axis_names.len(),
            });
        }
        if dims.contains(&0) {
            return Err(Error::EmptyInput("table axis"));
        }
        Ok(TableShape { dims, axis_names })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn axis_names(&self) -> &[String] {
        &self.axis_names
    }

    pub fn n_axes(&self) -> usize {
        self.dims.len()
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axis_names.iter().position(|a| a == name)
    }

    pub fn flat_index(&self, multi: &[usize]) -> Result<usize> {
        if multi.len() != self.dims.len() {
            return Err(Error::DimensionMismatch {
                what: "multi-index",
                expected: self.dims.len(),
                got: multi.len(),
            });
        }
        let mut flat = 0usize;
        for (axis, (&i, &d)) in multi.iter().zip(&self.dims).enumerate() {
            if i >= d {
                return Err(Error::DimensionMismatch {
                    what: "axis coordinate",
                    expected: d,
                    got: i,
                });
            }
            let _ = axis;
            flat = flat * d + i;
        }
        Ok(flat)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.dims.len()];
        for axis in (0..self.dims.len()).rev() {
            out[axis] = flat % self.dims[axis];
            flat /= self.dims[axis];
        }
        out
    }
}

/// One family of marginal-sum constraints: fix the joint totals over
/// `grouped_axes`, summing over `summed_axes`. The two lists must partition
/// the axis set. An empty grouped list is the grand total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginalSpec {
    grouped_axes: Vec<usize>,
    summed_axes: Vec<usize>,
}

impl MarginalSpec {
    pub fn new(grouped_axes: Vec<usize>, summed_axes: Vec<usize>, n_axes: usize) -> Result<Self> {
        let mut seen = vec![false; n_axes];
        for &ax in grouped_axes.iter().chain(&summed_axes) {
            if ax >= n_axes {
                return Err(Error::AxisOverlap(format!(
                    "axis {ax} out of range for {n_axes} axes"
                )));
            }
            if seen[ax] {
                return Err(Error::AxisOverlap(format!(
                    "axis {ax} appears more than once across grouped and summed lists"
                )));
            }
            seen[ax] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::AxisOverlap(
                "grouped and summed axes must cover every axis".into(),
            ));
        }
        Ok(MarginalSpec {
            grouped_axes,
            summed_axes,
        })
    }

    /// Groups by the given axes and sums over the complement.
    pub fn group_by(grouped_axes: Vec<usize>, n_axes: usize) -> Result<Self> {
        let summed: Vec<usize> = (0..n_axes)
            .filter(|ax| !grouped_axes.contains(ax))
            .collect();
        MarginalSpec::new(grouped_axes, summed, n_axes)
    }

    pub fn grouped_axes(&self) -> &[usize] {
        &self.grouped_axes
    }

    pub fn summed_axes(&self) -> &[usize] {
        &self.summed_axes
    }

    pub fn n_axes(&self) -> usize {
        self.grouped_axes.len() + self.summed_axes.len()
    }

    /// Number of constraint rows this spec contributes: one per joint cell
    /// of the grouped axes.
    pub fn row_count(&self, shape: &TableShape) -> usize {
        self.grouped_axes
            .iter()
            .map(|&ax| shape.dims()[ax])
            .product()
    }
}

/// Builds the 0/1 indicator rows of one marginal spec: row r has ones at
/// every flat cell whose grouped coordinates match joint cell r (joint cells
/// enumerate row-major in the order the grouped axes were given).
pub fn marginal_rows(shape: &TableShape, spec: &MarginalSpec) -> Result<DMatrix<f64>> {
    if spec.n_axes() != shape.n_axes() {
        return Err(Error::DimensionMismatch {
            what: "marginal spec axes",
            expected: shape.n_axes(),
            got: spec.n_axes(),
        });
    }
    let rows = spec.row_count(shape);
    let mut out = DMatrix::zeros(rows, shape.size());
    for flat in 0..shape.size() {
        let multi = shape.multi_index(flat);
        let mut joint = 0usize;
        for &ax in &spec.grouped_axes {
            joint = joint * shape.dims()[ax] + multi[ax];
        }
        out[(joint, flat)] = 1.0;
    }
    Ok(out)
}

/// Stacks the rows of every spec and analyzes them as one invariant system.
/// Overlapping specs produce redundant rows; those are reduced inside the
/// system and surface in its `redundant_rows` count.
pub fn build_marginal_invariants(
    shape: &TableShape,
    specs: &[MarginalSpec],
    rank_tolerance: Option<f64>,
) -> Result<InvariantSystem> {
    if specs.is_empty() {
        return Err(Error::EmptyInput("marginal specs"));
    }
    let total_rows: usize = specs.iter().map(|s| s.row_count(shape)).sum();
    let mut c = DMatrix::zeros(total_rows, shape.size());
    let mut offset = 0usize;
    for spec in specs {
        let block = marginal_rows(shape, spec)?;
        c.rows_mut(offset, block.nrows()).copy_from(&block);
        offset += block.nrows();
    }
    build_invariant_system(c, rank_tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSource;

    #[test]
    fn histogram_validation() {
        assert!(Histogram::new(vec![]).is_err());
        assert!(matches!(
            Histogram::new(vec![1.0, -2.0]),
            Err(Error::NegativeCount { index: 1, .. })
        ));
        assert!(Histogram::new(vec![1.0, f64::INFINITY]).is_err());
        let h = Histogram::new(vec![3.0, 5.0]).unwrap();
        assert_eq!(h.total(), 8.0);
    }

    #[test]
    fn evaluation_matches_naive_oracle() {
        let h = Histogram::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = LinearQuery::identity(4);
        assert_eq!(id.evaluate(&h).unwrap(), *h.counts());

        let total = LinearQuery::total(4);
        assert_eq!(total.evaluate(&h).unwrap()[0], 10.0);

        let q = LinearQuery::new(
            DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]),
            "pairs",
        )
        .unwrap();
        let got = q.evaluate(&h).unwrap();
        // naive row-by-row oracle
        let mut expect = [0.0f64; 2];
        for (r, e) in expect.iter_mut().enumerate() {
            for c in 0..4 {
                *e += q.matrix()[(r, c)] * h.counts()[c];
            }
        }
        assert_eq!(got[0], expect[0]);
        assert_eq!(got[1], expect[1]);
        assert_eq!(got[0], 4.0);
        assert_eq!(got[1], 6.0);
    }

    #[test]
    fn sensitivities_of_reference_queries() {
        let id = LinearQuery::identity(5);
        assert!((id.l_p_sensitivity(NormOrder::L2) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(id.l_p_sensitivity(NormOrder::L1), 2.0);

        // single-column universe: replacement is impossible
        let total = LinearQuery::total(7);
        assert_eq!(total.l_p_sensitivity(NormOrder::L1), 0.0);
        assert_eq!(total.l_p_sensitivity(NormOrder::L2), 0.0);
        let single =
            LinearQuery::new(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]), "col").unwrap();
        assert_eq!(single.l_p_sensitivity(NormOrder::L2), 0.0);

        let diag =
            LinearQuery::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]), "diag").unwrap();
        assert!((diag.l_p_sensitivity(NormOrder::L2) - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(diag.l_p_sensitivity(NormOrder::L1), 3.0);
    }

    #[test]
    fn brute_force_pairwise_oracle_agrees_on_random_query() {
        let mut s = NoiseSource::from_seed(17).sampler();
        let q = LinearQuery::new(
            DMatrix::from_fn(4, 6, |_, _| s.next_gaussian(2.0)),
            "random",
        )
        .unwrap();
        let mut worst1: f64 = 0.0;
        let mut worst2: f64 = 0.0;
        for z in 0..6 {
            for w in 0..6 {
                if z == w {
                    continue;
                }
                let d = q.matrix().column(z) - q.matrix().column(w);
                worst1 = worst1.max(d.iter().map(|v| v.abs()).sum());
                worst2 = worst2.max(d.norm());
            }
        }
        assert_eq!(q.l_p_sensitivity(NormOrder::L1), worst1);
        assert_eq!(q.l_p_sensitivity(NormOrder::L2), worst2);
    }

    #[test]
    fn projected_query_preserves_or_kills_sensitivity() {
        // identity under a grand total: the projection keeps sensitivity sqrt(2)
        let sys = build_invariant_system(DMatrix::from_element(1, 4, 1.0), None).unwrap();
        let id = LinearQuery::identity(4);
        let proj = id.projected_query(&sys).unwrap();
        assert_eq!(proj.n(), 3);
        let s0 = id.l_p_sensitivity(NormOrder::L2);
        let s1 = proj.l_p_sensitivity(NormOrder::L2);
        assert!((s0 - s1).abs() < 1e-12, "{s0} vs {s1}");

        // identity under C = (1, -1): every column difference lies in the row
        // space, so the projected query is insensitive
        let sys =
            build_invariant_system(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), None).unwrap();
        let id = LinearQuery::identity(2);
        let proj = id.projected_query(&sys).unwrap();
        assert!(proj.l_p_sensitivity(NormOrder::L2) < 1e-12);
    }

    #[test]
    fn flat_and_multi_index_are_inverse_bijections() {
        let shape =
            TableShape::new(vec![2, 3, 4], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(shape.size(), 24);
        let mut seen = [false; 24];
        for i0 in 0..2 {
            for i1 in 0..3 {
                for i2 in 0..4 {
                    let flat = shape.flat_index(&[i0, i1, i2]).unwrap();
                    assert!(!seen[flat]);
                    seen[flat] = true;
                    assert_eq!(shape.multi_index(flat), vec![i0, i1, i2]);
                }
            }
        }
        // row-major: last axis fastest
        assert_eq!(shape.flat_index(&[0, 0, 1]).unwrap(), 1);
        assert_eq!(shape.flat_index(&[0, 1, 0]).unwrap(), 4);
        assert_eq!(shape.flat_index(&[1, 0, 0]).unwrap(), 12);
    }

    #[test]
    fn marginal_spec_validation() {
        assert!(MarginalSpec::new(vec![0], vec![1], 2).is_ok());
        assert!(matches!(
            MarginalSpec::new(vec![0], vec![0, 1], 2),
            Err(Error::AxisOverlap(_))
        ));
        assert!(matches!(
            MarginalSpec::new(vec![0], vec![], 2),
            Err(Error::AxisOverlap(_))
        ));
        assert!(matches!(
            MarginalSpec::new(vec![0, 3], vec![1], 3),
            Err(Error::AxisOverlap(_))
        ));
        let spec = MarginalSpec::group_by(vec![1], 3).unwrap();
        assert_eq!(spec.summed_axes(), &[0, 2]);
    }

    #[test]
    fn grand_total_spec_is_the_ones_row() {
        let shape = TableShape::new(vec![4], vec!["x".into()]).unwrap();
        let spec = MarginalSpec::group_by(vec![], 1).unwrap();
        let rows = marginal_rows(&shape, &spec).unwrap();
        assert_eq!(rows.nrows(), 1);
        assert!(rows.iter().all(|&v| v == 1.0));
        let sys = build_marginal_invariants(&shape, &[spec], None).unwrap();
        assert_eq!(sys.n_c(), 1);
    }

    #[test]
    fn two_by_two_both_margins_have_rank_three() {
        let shape = TableShape::new(vec![2, 2], vec!["r".into(), "c".into()]).unwrap();
        let specs = vec![
            MarginalSpec::group_by(vec![0], 2).unwrap(),
            MarginalSpec::group_by(vec![1], 2).unwrap(),
        ];
        let sys = build_marginal_invariants(&shape, &specs, None).unwrap();
        assert_eq!(sys.c_raw().nrows(), 4);
        assert_eq!(sys.n_c(), 3);
        assert_eq!(sys.redundant_rows(), 1);
    }

    #[test]
    fn marginal_rows_sum_the_right_cells() {
        let shape = TableShape::new(vec![2, 3], vec!["g".into(), "h".into()]).unwrap();
        let spec = MarginalSpec::group_by(vec![1], 2).unwrap();
        let rows = marginal_rows(&shape, &spec).unwrap();
        assert_eq!(rows.nrows(), 3);

        let mut s = NoiseSource::from_seed(5).sampler();
        let table: Vec<f64> = (0..6).map(|_| s.next_uniform() * 10.0).collect();
        let h = DVector::from_vec(table.clone());
        let got = &rows * &h;
        // oracle: direct nested-loop summation
        for h_val in 0..3 {
            let mut expect = 0.0;
            for g in 0..2 {
                expect += table[shape.flat_index(&[g, h_val]).unwrap()];
            }
            assert!((got[h_val] - expect).abs() < 1e-12);
        }
    }
}
