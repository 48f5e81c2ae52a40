//! Dense row-major `f64` matrices and the eager numeric kernels built on them.
//!
//! Everything in the crate ultimately bottoms out here. Shape-sensitive
//! operations are fallible and name both operand shapes in their errors;
//! helpers that cannot fail (elementwise maps, transposes) return plain
//! values. The matmul kernel iterates i-k-j so the inner loop streams both
//! the output row and a row of the right operand, which keeps it friendly
//! to the vectorizer — the benchmark criteria are measured on this kernel.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    /// Builds a matrix from row-major data. Fails if `data.len() != rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadShape {
                op: "Matrix::new",
                rows,
                cols,
                reason: format!("data length {} != rows*cols {}", data.len(), rows * cols),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Wraps a row-major buffer; its length must equal rows x cols.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadShape {
                op: "Matrix::from_vec",
                rows,
                cols,
                reason: format!("buffer holds {} values, want {}", data.len(), rows * cols),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from a slice of rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::BadShape {
                    op: "Matrix::from_rows",
                    rows: r,
                    cols: c,
                    reason: format!("ragged row of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    /// Column vector (n x 1) from a slice.
    pub fn col_vector(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Row vector (1 x n) from a slice.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// 1x1 matrix holding a single scalar.
    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The value of a 1x1 matrix.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1), "scalar_value on non-scalar matrix");
        self.data[0]
    }

    fn shape_err(&self, op: &'static str, other: &Matrix) -> Error {
        Error::ShapeMismatch {
            op,
            lhs_rows: self.rows,
            lhs_cols: self.cols,
            rhs_rows: other.rows,
            rhs_cols: other.cols,
        }
    }

    /// Matrix product. The inner loop is a row-saxpy so the compiler can
    /// vectorize it; this is the hot kernel for everything downstream.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(self.shape_err("matmul", other));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(self.shape_err("add", other));
        }
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(self.shape_err("sub", other));
        }
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(self.shape_err("hadamard", other));
        }
        Ok(self.zip_with(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(self.shape_err("add_assign", other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    pub fn relu(&self) -> Matrix {
        self.map(|x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Matrix {
        self.map(sigmoid)
    }

    pub fn exp(&self) -> Matrix {
        self.map(f64::exp)
    }

    /// Numerically stable softplus, elementwise: `ln(1 + e^x)`.
    pub fn softplus(&self) -> Matrix {
        self.map(softplus)
    }

    /// Row-wise softmax with the max-subtraction trick, so rows containing
    /// large values (e.g. 1000) still produce finite probabilities.
    pub fn row_softmax(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        out
    }

    /// Row-wise log-sum-exp, returning an n x 1 column.
    pub fn row_logsumexp(&self) -> Matrix {
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            out.push(logsumexp(self.row(i)));
        }
        Matrix {
            rows: self.rows,
            cols: 1,
            data: out,
        }
    }

    /// Column-wise log-sum-exp, returning a 1 x m row. Streams the matrix
    /// row-major twice (max pass, then sum pass) to stay cache-friendly.
    pub fn col_logsumexp(&self) -> Matrix {
        let mut maxes = vec![f64::NEG_INFINITY; self.cols];
        for i in 0..self.rows {
            for (m, &x) in maxes.iter_mut().zip(self.row(i)) {
                if x > *m {
                    *m = x;
                }
            }
        }
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for ((s, &m), &x) in sums.iter_mut().zip(&maxes).zip(self.row(i)) {
                *s += (x - m).exp();
            }
        }
        let data = sums
            .iter()
            .zip(&maxes)
            .map(|(&s, &m)| {
                if m == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    m + s.ln()
                }
            })
            .collect();
        Matrix {
            rows: 1,
            cols: self.cols,
            data,
        }
    }

    /// Adds a 1 x cols row vector to every row (e.g. a bias).
    pub fn add_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(self.shape_err("add_row_broadcast", row));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Adds an rows x 1 column vector to every column.
    pub fn add_col_broadcast(&self, col: &Matrix) -> Result<Matrix> {
        if col.cols != 1 || col.rows != self.rows {
            return Err(self.shape_err("add_col_broadcast", col));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            let c = col.data[i];
            for x in out.row_mut(i) {
                *x += c;
            }
        }
        Ok(out)
    }

    /// Multiplies every row elementwise by a 1 x cols row vector.
    pub fn mul_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(self.shape_err("mul_row_broadcast", row));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (x, &r) in out.row_mut(i).iter_mut().zip(&row.data) {
                *x *= r;
            }
        }
        Ok(out)
    }

    /// Scales row i by `weights[i]`; equivalent to `Diag(w) * self`.
    pub fn scale_rows(&self, weights: &Matrix) -> Result<Matrix> {
        if weights.cols != 1 || weights.rows != self.rows {
            return Err(self.shape_err("scale_rows", weights));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            let w = weights.data[i];
            for x in out.row_mut(i) {
                *x *= w;
            }
        }
        Ok(out)
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(Error::BadShape {
                op: "slice_cols",
                rows: self.rows,
                cols: self.cols,
                reason: format!("column range {}..{} out of bounds", start, start + len),
            });
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: len,
            data,
        })
    }

    /// Horizontal concatenation; all parts must have equal row counts.
    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        for p in parts {
            if p.rows != rows {
                return Err(Error::BadShape {
                    op: "concat_cols",
                    rows: p.rows,
                    cols: p.cols,
                    reason: format!("expected {rows} rows in every part"),
                });
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Gathers rows by index into a new matrix (duplicates allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::BadShape {
                    op: "select_rows",
                    rows: self.rows,
                    cols: self.cols,
                    reason: format!("row index {i} out of bounds"),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Per-column mean, returning a 1 x cols row.
    pub fn col_mean(&self) -> Matrix {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        let n = self.rows.max(1) as f64;
        Matrix {
            rows: 1,
            cols: self.cols,
            data: sums.into_iter().map(|s| s / n).collect(),
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        sums
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-sum-exp of a slice with the max trick; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}
