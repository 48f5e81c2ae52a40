//! Dustbin-augmented optimal-transport assignment.
//!
//! The correlation of the two feature matrices is augmented with a dustbin
//! row and column (learnable score z) that absorb unmatched keypoints, then
//! normalized by log-domain Sinkhorn iterations toward marginals in which
//! every real keypoint carries unit mass and the dustbins carry the slack
//! (`m` for the dustbin row, `n` for the dustbin column). Matches are the
//! cells of the real block that win both their row and their column and
//! clear a confidence threshold.

use crate::error::{Error, Result};
use crate::tensorcore::engine::{Eager, Engine};
use crate::tensorcore::matrix::Matrix;
use crate::tensorcore::params::ParamSet;

/// Sinkhorn-normalized (n+1)x(m+1) match-probability matrix.
///
/// Real-block entries and the dustbin row lie in [0,1]: the column
/// normalization runs last, so every real column sums to exactly 1 at any
/// iteration count. Dustbin-column entries (corner included) are bounded by
/// that column's total mass n instead — partially converged matrices may
/// concentrate several units of unmatched mass on one keypoint before the
/// row constraint spreads it out.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    values: Matrix,
    n: usize,
    m: usize,
}

impl AssignmentMatrix {
    /// Wraps a raw (n+1)x(m+1) probability matrix, validating shape and
    /// entry ranges.
    pub fn from_values(values: Matrix) -> Result<Self> {
        let (rows, cols) = values.shape();
        if rows == 0 || cols == 0 {
            return Err(Error::BadShape {
                op: "AssignmentMatrix::from_values",
                rows,
                cols,
                reason: "need at least the dustbin row and column".into(),
            });
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("AssignmentMatrix::from_values"));
        }
        let (n, m) = (rows - 1, cols - 1);
        let dustbin_col_cap = (n as f64).max(1.0) + 1e-6;
        for i in 0..rows {
            for j in 0..cols {
                let v = values.at(i, j);
                let cap = if j == m { dustbin_col_cap } else { 1.0 + 1e-9 };
                if v < -1e-9 || v > cap {
                    return Err(Error::contract(
                        "AssignmentMatrix::from_values",
                        format!("entry ({i},{j}) = {v} outside [0,{cap}]"),
                    ));
                }
            }
        }
        Ok(AssignmentMatrix { values, n, m })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Real keypoint counts (n for image A rows, m for image B columns).
    pub fn real_shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    /// Probability of the real-block cell (i, j).
    pub fn real(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.n && j < self.m);
        self.values.at(i, j)
    }

    /// Probability that keypoint i of image A is unmatched.
    pub fn dustbin_a(&self, i: usize) -> f64 {
        self.values.at(i, self.m)
    }

    /// Probability that keypoint j of image B is unmatched.
    pub fn dustbin_b(&self, j: usize) -> f64 {
        self.values.at(self.n, j)
    }

    /// Sum of row i over all m+1 columns (interior rows should be ~1).
    pub fn row_sum(&self, i: usize) -> f64 {
        self.values.row(i).iter().sum()
    }

    /// Sum of column j over all n+1 rows.
    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.n + 1).map(|i| self.values.at(i, j)).sum()
    }
}

/// A single extracted correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub confidence: f64,
}

/// One-to-one list of extracted correspondences.
pub type MatchList = Vec<Match>;

/// Feature correlation C = F_A F_B^T.
pub fn correlation(f_a: &Matrix, f_b: &Matrix) -> Result<Matrix> {
    if f_a.cols() != f_b.cols() {
        return Err(Error::ShapeMismatch {
            op: "correlation",
            lhs_rows: f_a.rows(),
            lhs_cols: f_a.cols(),
            rhs_rows: f_b.rows(),
            rhs_cols: f_b.cols(),
        });
    }
    f_a.matmul(&f_b.transpose())
}

/// Appends a dustbin row and column (corner included) filled with z.
pub fn augment_dustbin(c: &Matrix, z: f64) -> Matrix {
    let (n, m) = c.shape();
    let mut out = Matrix::filled(n + 1, m + 1, z);
    for i in 0..n {
        out.row_mut(i)[..m].copy_from_slice(c.row(i));
    }
    out
}

/// Log-domain Sinkhorn on an augmented score matrix, engine-generic so the
/// same loop is both differentiable (taped) and cheap at inference (eager).
///
/// Marginals follow the SuperGlue convention: a = (1,…,1,m) over rows,
/// b = (1,…,1,n) over columns. One iteration = row update then column
/// update, so after the final iteration column sums are exact and row sums
/// converge geometrically. Returns log M; exponentiate for probabilities.
pub fn sinkhorn_log_generic<E: Engine>(
    eng: &mut E,
    c_hat: &E::T,
    iterations: usize,
) -> E::T {
    let (rows, cols) = eng.shape(c_hat);
    debug_assert!(rows >= 2 && cols >= 2, "degenerate sizes handled by caller");
    let (n, m) = (rows - 1, cols - 1);

    let mut log_mu = vec![0.0; n + 1];
    log_mu[n] = (m as f64).ln();
    let mut log_nu = vec![0.0; m + 1];
    log_nu[m] = (n as f64).ln();
    let log_mu = eng.constant(Matrix::col_vector(&log_mu));
    let log_nu = eng.constant(Matrix::row_vector(&log_nu));

    let mut u = eng.constant(Matrix::zeros(n + 1, 1));
    let mut v = eng.constant(Matrix::zeros(1, m + 1));
    for _ in 0..iterations {
        let zv = eng.add_row_broadcast(c_hat, &v);
        let row_lse = eng.row_logsumexp(&zv);
        u = eng.sub(&log_mu, &row_lse);
        let zu = eng.add_col_broadcast(c_hat, &u);
        let col_lse = eng.col_logsumexp(&zu);
        v = eng.sub(&log_nu, &col_lse);
    }
    let zu = eng.add_col_broadcast(c_hat, &u);
    eng.add_row_broadcast(&zu, &v)
}

/// Sinkhorn normalization of an augmented (n+1)x(m+1) score matrix.
///
/// Degenerate inputs with n = 0 or m = 0 skip the iteration entirely: the
/// marginals force every real point into its dustbin and the corner to 0.
pub fn sinkhorn(c_hat: &Matrix, iterations: usize) -> Result<AssignmentMatrix> {
    if iterations < 1 {
        return Err(Error::contract("sinkhorn", "iterations must be >= 1"));
    }
    if !c_hat.all_finite() {
        return Err(Error::NonFinite("sinkhorn input"));
    }
    let (rows, cols) = c_hat.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::BadShape {
            op: "sinkhorn",
            rows,
            cols,
            reason: "augmented matrix needs its dustbin row and column".into(),
        });
    }
    let (n, m) = (rows - 1, cols - 1);
    if n == 0 || m == 0 {
        // All mass forced by the marginals; nothing to iterate.
        let mut values = Matrix::zeros(rows, cols);
        for i in 0..n {
            values.set(i, m, 1.0);
        }
        for j in 0..m {
            values.set(n, j, 1.0);
        }
        return AssignmentMatrix::from_values(values);
    }
    let empty = ParamSet::new();
    let mut eng = Eager::new(&empty);
    let log_m = sinkhorn_log_generic(&mut eng, c_hat, iterations);
    AssignmentMatrix::from_values(log_m.exp())
}

/// Extracts the one-to-one match set: real-block cells that are the strict
/// maximum of both their row and their column (dustbins compete but are
/// never selected) with confidence at or above `threshold`.
pub fn extract_matches(m: &AssignmentMatrix, threshold: f64) -> Result<MatchList> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::contract(
            "extract_matches",
            format!("threshold {threshold} outside [0,1)"),
        ));
    }
    let (n, mm) = m.real_shape();
    let values = m.values();

    // Strict row/column argmaxes over the full augmented matrix; ties yield
    // no winner, which keeps extraction deterministic and order-independent.
    let mut row_best: Vec<Option<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let row = values.row(i);
        let mut best = 0usize;
        let mut tied = false;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
                tied = false;
            } else if v == row[best] {
                tied = true;
            }
        }
        row_best.push(if tied { None } else { Some(best) });
    }
    let mut col_best: Vec<Option<usize>> = Vec::with_capacity(mm);
    for j in 0..mm {
        let mut best = 0usize;
        let mut tied = false;
        for i in 1..n + 1 {
            let v = values.at(i, j);
            if v > values.at(best, j) {
                best = i;
                tied = false;
            } else if v == values.at(best, j) {
                tied = true;
            }
        }
        col_best.push(if tied { None } else { Some(best) });
    }

    let mut out = MatchList::new();
    for i in 0..n {
        if let Some(j) = row_best[i] {
            if j < mm && col_best[j] == Some(i) && values.at(i, j) >= threshold {
                out.push(Match {
                    a: i,
                    b: j,
                    confidence: values.at(i, j),
                });
            }
        }
    }
    Ok(out)
}
