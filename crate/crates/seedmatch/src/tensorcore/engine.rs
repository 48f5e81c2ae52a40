//! Execution engines: one trait, two interpreters.
//!
//! Network code is written once against [`Engine`] and can then run either
//! eagerly (no graph retained — cheap on memory, used for inference and
//! benchmarking, with a multiply-add counter for cost-model validation) or
//! on a [`Tape`] (used for training, where the same calls record a graph
//! for reverse-mode differentiation).
//!
//! Engine methods panic on shape misuse: shapes are validated once at the
//! public entry points, after which mismatches are programming errors.

use std::collections::HashMap;

use crate::tensorcore::matrix::Matrix;
use crate::tensorcore::params::{ParamId, ParamSet};
use crate::tensorcore::tape::{Tape, Var};

/// Abstract executor for the differentiable parts of the pipeline.
pub trait Engine {
    /// Handle to a value (a concrete [`Matrix`] or a tape node).
    type T: Clone;

    fn constant(&mut self, m: Matrix) -> Self::T;
    fn param(&mut self, id: ParamId) -> Self::T;
    /// Detached copy of the current value.
    fn value(&self, t: &Self::T) -> Matrix;
    fn shape(&self, t: &Self::T) -> (usize, usize);
    /// Identity forward; blocks gradients backward (no-op when eager).
    fn stop_gradient(&mut self, x: &Self::T) -> Self::T;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn hadamard(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&mut self, x: &Self::T, factor: f64) -> Self::T;
    fn add_const(&mut self, x: &Self::T, c: f64) -> Self::T;
    fn add_row_broadcast(&mut self, x: &Self::T, r: &Self::T) -> Self::T;
    fn add_col_broadcast(&mut self, x: &Self::T, c: &Self::T) -> Self::T;
    fn mul_row_broadcast(&mut self, x: &Self::T, r: &Self::T) -> Self::T;
    fn scale_rows(&mut self, x: &Self::T, w: &Self::T) -> Self::T;
    fn transpose(&mut self, x: &Self::T) -> Self::T;
    fn row_softmax(&mut self, x: &Self::T) -> Self::T;
    fn row_logsumexp(&mut self, x: &Self::T) -> Self::T;
    fn col_logsumexp(&mut self, x: &Self::T) -> Self::T;
    fn exp(&mut self, x: &Self::T) -> Self::T;
    fn relu(&mut self, x: &Self::T) -> Self::T;
    fn sigmoid(&mut self, x: &Self::T) -> Self::T;
    fn softplus(&mut self, x: &Self::T) -> Self::T;
    fn sqrt(&mut self, x: &Self::T) -> Self::T;
    fn recip(&mut self, x: &Self::T) -> Self::T;
    fn slice_cols(&mut self, x: &Self::T, start: usize, len: usize) -> Self::T;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Self::T;
    fn select_rows(&mut self, x: &Self::T, indices: &[usize]) -> Self::T;
    fn gather_entries(&mut self, x: &Self::T, entries: &[(usize, usize)]) -> Self::T;
    fn col_mean(&mut self, x: &Self::T) -> Self::T;
    fn sum_all(&mut self, x: &Self::T) -> Self::T;
    fn augment_dustbin(&mut self, x: &Self::T, z: &Self::T) -> Self::T;
}

/// Direct evaluation on matrices. Values drop as soon as the caller lets
/// them go, which keeps large-input inference within a predictable memory
/// envelope. Counts matmul multiply-adds for cost-model validation.
pub struct Eager<'p> {
    params: &'p ParamSet,
    /// Multiply-add count across all `matmul` calls so far.
    pub madds: u128,
}

impl<'p> Eager<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Eager { params, madds: 0 }
    }
}

impl Engine for Eager<'_> {
    type T = Matrix;

    fn constant(&mut self, m: Matrix) -> Matrix {
        m
    }

    fn param(&mut self, id: ParamId) -> Matrix {
        self.params.value(id).clone()
    }

    fn value(&self, t: &Matrix) -> Matrix {
        t.clone()
    }

    fn shape(&self, t: &Matrix) -> (usize, usize) {
        t.shape()
    }

    fn stop_gradient(&mut self, x: &Matrix) -> Matrix {
        x.clone()
    }

    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        self.madds += (a.rows() * a.cols() * b.cols()) as u128;
        a.matmul(b).expect("engine matmul shapes")
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.add(b).expect("engine add shapes")
    }

    fn sub(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.sub(b).expect("engine sub shapes")
    }

    fn hadamard(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.hadamard(b).expect("engine hadamard shapes")
    }

    fn scale(&mut self, x: &Matrix, factor: f64) -> Matrix {
        x.scale(factor)
    }

    fn add_const(&mut self, x: &Matrix, c: f64) -> Matrix {
        x.map(|e| e + c)
    }

    fn add_row_broadcast(&mut self, x: &Matrix, r: &Matrix) -> Matrix {
        x.add_row_broadcast(r).expect("engine add_row_broadcast shapes")
    }

    fn add_col_broadcast(&mut self, x: &Matrix, c: &Matrix) -> Matrix {
        x.add_col_broadcast(c).expect("engine add_col_broadcast shapes")
    }

    fn mul_row_broadcast(&mut self, x: &Matrix, r: &Matrix) -> Matrix {
        x.mul_row_broadcast(r).expect("engine mul_row_broadcast shapes")
    }

    fn scale_rows(&mut self, x: &Matrix, w: &Matrix) -> Matrix {
        x.scale_rows(w).expect("engine scale_rows shapes")
    }

    fn transpose(&mut self, x: &Matrix) -> Matrix {
        x.transpose()
    }

    fn row_softmax(&mut self, x: &Matrix) -> Matrix {
        x.row_softmax()
    }

    fn row_logsumexp(&mut self, x: &Matrix) -> Matrix {
        x.row_logsumexp()
    }

    fn col_logsumexp(&mut self, x: &Matrix) -> Matrix {
        x.col_logsumexp()
    }

    fn exp(&mut self, x: &Matrix) -> Matrix {
        x.exp()
    }

    fn relu(&mut self, x: &Matrix) -> Matrix {
        x.relu()
    }

    fn sigmoid(&mut self, x: &Matrix) -> Matrix {
        x.sigmoid()
    }

    fn softplus(&mut self, x: &Matrix) -> Matrix {
        x.softplus()
    }

    fn sqrt(&mut self, x: &Matrix) -> Matrix {
        x.map(f64::sqrt)
    }

    fn recip(&mut self, x: &Matrix) -> Matrix {
        x.map(f64::recip)
    }

    fn slice_cols(&mut self, x: &Matrix, start: usize, len: usize) -> Matrix {
        x.slice_cols(start, len).expect("engine slice_cols bounds")
    }

    fn concat_cols(&mut self, parts: &[Matrix]) -> Matrix {
        let refs: Vec<&Matrix> = parts.iter().collect();
        Matrix::concat_cols(&refs).expect("engine concat_cols shapes")
    }

    fn select_rows(&mut self, x: &Matrix, indices: &[usize]) -> Matrix {
        x.select_rows(indices).expect("engine select_rows bounds")
    }

    fn gather_entries(&mut self, x: &Matrix, entries: &[(usize, usize)]) -> Matrix {
        let data: Vec<f64> = entries.iter().map(|&(r, c)| x.at(r, c)).collect();
        Matrix::col_vector(&data)
    }

    fn col_mean(&mut self, x: &Matrix) -> Matrix {
        x.col_mean()
    }

    fn sum_all(&mut self, x: &Matrix) -> Matrix {
        Matrix::scalar(x.sum())
    }

    fn augment_dustbin(&mut self, x: &Matrix, z: &Matrix) -> Matrix {
        let z0 = z.scalar_value();
        let (n, m) = x.shape();
        let mut out = Matrix::filled(n + 1, m + 1, z0);
        for i in 0..n {
            out.row_mut(i)[..m].copy_from_slice(x.row(i));
        }
        out
    }
}

/// Records onto a [`Tape`] for reverse-mode differentiation. Parameter
/// nodes are memoized so each parameter appears once per tape regardless of
/// how many times it is used.
pub struct Taped<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Taped<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Taped {
            tape: Tape::new(),
            params,
            param_nodes: HashMap::new(),
        }
    }

    /// Consumes the engine, returning the recorded tape.
    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Engine for Taped<'_> {
    type T = Var;

    fn constant(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.tape.param(id, self.params);
        self.param_nodes.insert(id, v);
        v
    }

    fn value(&self, t: &Var) -> Matrix {
        self.tape.value(*t).clone()
    }

    fn shape(&self, t: &Var) -> (usize, usize) {
        self.tape.value(*t).shape()
    }

    fn stop_gradient(&mut self, x: &Var) -> Var {
        self.tape.stop_gradient(*x)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        self.tape.matmul(*a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        self.tape.sub(*a, *b)
    }

    fn hadamard(&mut self, a: &Var, b: &Var) -> Var {
        self.tape.hadamard(*a, *b)
    }

    fn scale(&mut self, x: &Var, factor: f64) -> Var {
        self.tape.scale(*x, factor)
    }

    fn add_const(&mut self, x: &Var, c: f64) -> Var {
        self.tape.add_const(*x, c)
    }

    fn add_row_broadcast(&mut self, x: &Var, r: &Var) -> Var {
        self.tape.add_row_broadcast(*x, *r)
    }

    fn add_col_broadcast(&mut self, x: &Var, c: &Var) -> Var {
        self.tape.add_col_broadcast(*x, *c)
    }

    fn mul_row_broadcast(&mut self, x: &Var, r: &Var) -> Var {
        self.tape.mul_row_broadcast(*x, *r)
    }

    fn scale_rows(&mut self, x: &Var, w: &Var) -> Var {
        self.tape.scale_rows(*x, *w)
    }

    fn transpose(&mut self, x: &Var) -> Var {
        self.tape.transpose(*x)
    }

    fn row_softmax(&mut self, x: &Var) -> Var {
        self.tape.row_softmax(*x)
    }

    fn row_logsumexp(&mut self, x: &Var) -> Var {
        self.tape.row_logsumexp(*x)
    }

    fn col_logsumexp(&mut self, x: &Var) -> Var {
        self.tape.col_logsumexp(*x)
    }

    fn exp(&mut self, x: &Var) -> Var {
        self.tape.exp(*x)
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.tape.relu(*x)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        self.tape.sigmoid(*x)
    }

    fn softplus(&mut self, x: &Var) -> Var {
        self.tape.softplus(*x)
    }

    fn sqrt(&mut self, x: &Var) -> Var {
        self.tape.sqrt(*x)
    }

    fn recip(&mut self, x: &Var) -> Var {
        self.tape.recip(*x)
    }

    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Var {
        self.tape.slice_cols(*x, start, len)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.tape.concat_cols(parts)
    }

    fn select_rows(&mut self, x: &Var, indices: &[usize]) -> Var {
        self.tape.select_rows(*x, indices)
    }

    fn gather_entries(&mut self, x: &Var, entries: &[(usize, usize)]) -> Var {
        self.tape.gather_entries(*x, entries)
    }

    fn col_mean(&mut self, x: &Var) -> Var {
        self.tape.col_mean(*x)
    }

    fn sum_all(&mut self, x: &Var) -> Var {
        self.tape.sum_all(*x)
    }

    fn augment_dustbin(&mut self, x: &Var, z: &Var) -> Var {
        self.tape.augment_dustbin(*x, *z)
    }
}
