//! Constraint handling. A release mandate is a set of linear equalities
//! `C x = C x_true` that must hold exactly on published values. This module
//! decomposes R^n into the null space N of C (where noise may live) and the
//! row space R (which must be untouched), and exposes the projectors and
//! orthonormal bases downstream mechanisms need.
//!
//! The decomposition is computed as a thin QR of C^T followed by an SVD of
//! the small triangular factor. That yields the exact singular values of C
//! and its right singular vectors at O(n * m^2) cost, which keeps dense
//! problems with a few thousand cells tractable without a LAPACK binding.
//! The null-space basis and the dense projectors are materialized lazily:
//! every mechanism applies the null projector through the far smaller
//! row-space basis (`proj v = v - Q_R (Q_R^T v)`), so large systems never pay
//! for an n x n matrix unless a caller explicitly asks for one.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default relative threshold on singular values for rank decisions.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// Relative tolerance of the release-time invariant check:
/// ||C(values - A(h))||_inf <= RELEASE_CHECK_TOL * (1 + max|C| * ||A(h)||_inf).
pub const RELEASE_CHECK_TOL: f64 = 1e-8;

/// An analyzed constraint system. Immutable after construction; cheap to
/// share across threads. Redundant input rows are accepted and recorded in
/// `redundant_rows` rather than rejected.
#[derive(Debug, Clone)]
pub struct InvariantSystem {
    c_raw: DMatrix<f64>,
    reduced_c: DMatrix<f64>,
    reduced_row_indices: Vec<usize>,
    /// Right singular vectors of C, one column per singular value, sorted by
    /// descending singular value. n x min(m, n).
    right_vectors: DMatrix<f64>,
    singular_values: DVector<f64>,
    rank: usize,
    rank_tolerance: f64,
    redundant_rows: usize,
    c_max_abs: f64,
    q_null: OnceLock<DMatrix<f64>>,
    proj_null: OnceLock<DMatrix<f64>>,
    proj_row: OnceLock<DMatrix<f64>>,
    digest: OnceLock<String>,
}

/// Decomposes a constraint matrix. Fails if the matrix is empty, non-finite,
/// numerically zero, or of full column rank (in which case no randomness
/// could be added anywhere and a DP release is impossible).
pub fn build_invariant_system(
    c_matrix: DMatrix<f64>,
    rank_tolerance: Option<f64>,
) -> Result<InvariantSystem> {
    let tolerance = rank_tolerance.unwrap_or(DEFAULT_RANK_TOLERANCE);
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(Error::InvalidBudget(format!(
            "rank tolerance must lie in (0, 1), got {tolerance}"
        )));
    }
    let (m, n) = (c_matrix.nrows(), c_matrix.ncols());
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput("constraint matrix"));
    }
    if c_matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("constraint matrix"));
    }

    // C^T = Q1 R1 with Q1: n x p, R1: p x m, p = min(m, n). Then
    // C = R1^T Q1^T, and an SVD R1^T = U S Vbar^T gives C = U S (Q1 Vbar)^T:
    // the singular values of C and its right singular vectors W = Q1 Vbar.
    let p = m.min(n);
    let qr = c_matrix.transpose().qr();
    let q1 = qr.q();
    let r1 = qr.r();

    let svd = r1.transpose().svd(false, true);
    let v_t = svd
        .v_t
        .expect("svd of the triangular factor was requested with right vectors");
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("singular values are finite")
    });
    let singular_values = DVector::from_fn(p, |i, _| svd.singular_values[order[i]]);
    let vbar = DMatrix::from_fn(p, p, |i, j| v_t[(order[j], i)]);
    let right_vectors = &q1 * &vbar;

    let sigma_max = singular_values[0];
    if sigma_max <= 0.0 {
        return Err(Error::ZeroConstraint);
    }
    let rank = singular_values
        .iter()
        .take_while(|&&s| s > tolerance * sigma_max)
        .count();
    if rank == n {
        return Err(Error::FullRankConstraint { rank });
    }
    debug_assert!(rank >= 1);

    // Pick `rank` independent raw rows for the reduced system. Row j of C is
    // column j of C^T = Q1 R1, so independence of raw rows is independence of
    // the corresponding columns of the small factor R1.
    let mut reduced_row_indices = greedy_independent_columns(&r1, rank);
    reduced_row_indices.sort_unstable();
    let reduced_c = DMatrix::from_fn(rank, n, |i, j| c_matrix[(reduced_row_indices[i], j)]);

    let c_max_abs = c_matrix.amax();
    Ok(InvariantSystem {
        c_raw: c_matrix,
        reduced_c,
        reduced_row_indices,
        right_vectors,
        singular_values,
        rank,
        rank_tolerance: tolerance,
        redundant_rows: m - rank,
        c_max_abs,
        q_null: OnceLock::new(),
        proj_null: OnceLock::new(),
        proj_row: OnceLock::new(),
        digest: OnceLock::new(),
    })
}

impl InvariantSystem {
    /// Ambient dimension n (number of table cells).
    pub fn n(&self) -> usize {
        self.c_raw.ncols()
    }

    /// Numerical rank n_c of the constraint matrix.
    pub fn n_c(&self) -> usize {
        self.rank
    }

    /// Dimension of the null space, n - n_c.
    pub fn null_dim(&self) -> usize {
        self.n() - self.rank
    }

    /// Number of raw constraint rows that were linearly dependent on the
    /// kept ones. Nonzero values are worth surfacing to users as a warning.
    pub fn redundant_rows(&self) -> usize {
        self.redundant_rows
    }

    pub fn rank_tolerance(&self) -> f64 {
        self.rank_tolerance
    }

    pub fn c_raw(&self) -> &DMatrix<f64> {
        &self.c_raw
    }

    /// Independent subset of the raw constraint rows, n_c x n.
    pub fn reduced_c(&self) -> &DMatrix<f64> {
        &self.reduced_c
    }

    /// Raw-row indices that form `reduced_c`, ascending.
    pub fn reduced_row_indices(&self) -> &[usize] {
        &self.reduced_row_indices
    }

    /// Singular values of the raw constraint matrix, descending.
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// Orthonormal basis of the row space (right singular vectors with
    /// nonzero singular value), n x n_c.
    pub fn q_row(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.right_vectors.columns(0, self.rank)
    }

    /// Orthonormal basis of the null space, n x (n - n_c). Materialized on
    /// first use: the zero-singular-value right singular vectors, completed
    /// to a full orthonormal set with Householder reflections when C is
    /// wider than it is tall.
    pub fn q_null(&self) -> &DMatrix<f64> {
        self.q_null.get_or_init(|| {
            let n = self.n();
            let p = self.right_vectors.ncols();
            let extra = orthonormal_completion(&self.right_vectors);
            let mut q = DMatrix::zeros(n, n - self.rank);
            q.columns_mut(0, p - self.rank)
                .copy_from(&self.right_vectors.columns(self.rank, p - self.rank));
            q.columns_mut(p - self.rank, n - p).copy_from(&extra);
            q
        })
    }

    /// Dense null-space projector, n x n. `proj_null + proj_row = I` holds
    /// exactly in the stored entries (one is defined by subtraction from the
    /// other). Prefer `project_to_null` for applying it.
    pub fn proj_null(&self) -> &DMatrix<f64> {
        self.proj_null.get_or_init(|| {
            let pr = self.proj_row();
            DMatrix::from_fn(self.n(), self.n(), |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                id - pr[(i, j)]
            })
        })
    }

    /// Dense row-space projector Q_R Q_R^T, n x n.
    pub fn proj_row(&self) -> &DMatrix<f64> {
        self.proj_row.get_or_init(|| {
            let q = self.q_row();
            q * q.transpose()
        })
    }

    /// Applies the null-space projector: v - Q_R (Q_R^T v). O(n * n_c),
    /// no dense projector needed.
    pub fn project_to_null(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(v.len(), "vector to project")?;
        let q = self.q_row();
        let coeffs = q.transpose() * v;
        Ok(v - q * coeffs)
    }

    /// Applies the row-space projector Q_R (Q_R^T v).
    pub fn project_to_row(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(v.len(), "vector to project")?;
        let q = self.q_row();
        let coeffs = q.transpose() * v;
        Ok(q * coeffs)
    }

    /// C v over the raw constraint rows.
    pub fn apply_constraints(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(v.len(), "vector for constraint evaluation")?;
        Ok(&self.c_raw * v)
    }

    /// Absolute tolerance for the release-time invariant check, scaled by
    /// the true query answer: RELEASE_CHECK_TOL * (1 + max|C| * ||a||_inf).
    pub fn release_tolerance(&self, query_output: &DVector<f64>) -> f64 {
        let scale = if query_output.is_empty() {
            0.0
        } else {
            query_output.amax()
        };
        RELEASE_CHECK_TOL * (1.0 + self.c_max_abs * scale)
    }

    /// Cross-checks the stored projector against the Gram-formula projector
    /// I - C^T (C C^T)^{-1} C built from the reduced rows, a computationally
    /// independent route. Returns the max-entry deviation. Materializes both
    /// dense n x n matrices; intended for audits at moderate n.
    pub fn verify_conditioning_identity(&self) -> Result<f64> {
        let gram = &self.reduced_c * self.reduced_c.transpose();
        let chol = gram.cholesky().ok_or(Error::SingularGram)?;
        let solved = chol.solve(&self.reduced_c); // (C C^T)^{-1} C, n_c x n
        let gram_proj_row = self.reduced_c.transpose() * solved;
        let pn = self.proj_null();
        let mut dev: f64 = 0.0;
        for i in 0..self.n() {
            for j in 0..self.n() {
                let id = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((pn[(i, j)] - (id - gram_proj_row[(i, j)])).abs());
            }
        }
        Ok(dev)
    }

    /// Content hash binding releases to the exact raw constraint matrix.
    pub fn digest(&self) -> &str {
        self.digest.get_or_init(|| {
            let mut hasher = Sha256::new();
            hasher.update(b"invariant-system-v1");
            hasher.update((self.c_raw.nrows() as u64).to_le_bytes());
            hasher.update((self.c_raw.ncols() as u64).to_le_bytes());
            for i in 0..self.c_raw.nrows() {
                for j in 0..self.c_raw.ncols() {
                    hasher.update(self.c_raw[(i, j)].to_bits().to_le_bytes());
                }
            }
            hex_string(&hasher.finalize())
        })
    }

    /// JSON form: {n, n_c, c_rows, q_null}, matrices row-major. Materializes
    /// the null basis; meant for audit records of desk-scale systems.
    pub fn to_json(&self) -> serde_json::Value {
        let c_rows: Vec<Vec<f64>> = (0..self.rank)
            .map(|i| self.reduced_c.row(i).iter().copied().collect())
            .collect();
        let qn = self.q_null();
        let q_null: Vec<Vec<f64>> = (0..qn.nrows())
            .map(|i| qn.row(i).iter().copied().collect())
            .collect();
        json!({
            "n": self.n(),
            "n_c": self.rank,
            "c_rows": c_rows,
            "q_null": q_null,
        })
    }

    fn check_dim(&self, got: usize, what: &'static str) -> Result<()> {
        if got != self.n() {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.n(),
                got,
            });
        }
        Ok(())
    }
}

/// Greedy pivoted Gram-Schmidt on the columns of `mat`; returns the indices
/// of `count` independent columns in selection order.
fn greedy_independent_columns(mat: &DMatrix<f64>, count: usize) -> Vec<usize> {
    let mut work = mat.clone();
    let m = work.ncols();
    let mut picked = Vec::with_capacity(count);
    let mut used = vec![false; m];
    for _ in 0..count {
        let mut best = usize::MAX;
        let mut best_norm = -1.0;
        for (j, &taken) in used.iter().enumerate() {
            if taken {
                continue;
            }
            let norm = work.column(j).norm_squared();
            if norm > best_norm {
                best_norm = norm;
                best = j;
            }
        }
        let pivot = work.column(best).normalize();
        picked.push(best);
        used[best] = true;
        for (j, &taken) in used.iter().enumerate() {
            if taken {
                continue;
            }
            let coeff = pivot.dot(&work.column(j));
            let adjusted = work.column(j) - &pivot * coeff;
            work.set_column(j, &adjusted);
        }
    }
    picked
}

/// Completes a matrix with orthonormal columns (n x k) to an orthonormal
/// basis of R^n; returns the n x (n - k) complement. Householder QR of the
/// input, then the trailing columns of the accumulated Q.
fn orthonormal_completion(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = (w.nrows(), w.ncols());
    if n == k {
        return DMatrix::zeros(n, 0);
    }
    let mut a = w.clone();
    let mut reflectors: Vec<(DVector<f64>, f64)> = Vec::with_capacity(k);
    for j in 0..k {
        let tail_norm = a.view((j, j), (n - j, 1)).norm();
        let mut v = DVector::zeros(n);
        for i in j..n {
            v[i] = a[(i, j)];
        }
        if tail_norm > 0.0 {
            let alpha = if a[(j, j)] >= 0.0 {
                -tail_norm
            } else {
                tail_norm
            };
            v[j] -= alpha;
        }
        let vnorm2 = v.norm_squared();
        let tau = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
        for col in (j + 1)..k {
            let dot: f64 = (j..n).map(|i| v[i] * a[(i, col)]).sum();
            for i in j..n {
                a[(i, col)] -= tau * dot * v[i];
            }
        }
        reflectors.push((v, tau));
    }
    // Q = H_0 H_1 ... H_{k-1}; the complement is Q e_t for t = k..n, applying
    // the reflectors innermost-first.
    let mut out = DMatrix::zeros(n, n - k);
    for (idx, t) in (k..n).enumerate() {
        let mut x = DVector::zeros(n);
        x[t] = 1.0;
        for (v, tau) in reflectors.iter().rev() {
            let dot = v.dot(&x);
            x.axpy(-tau * dot, v, 1.0);
        }
        out.set_column(idx, &x);
    }
    out
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
