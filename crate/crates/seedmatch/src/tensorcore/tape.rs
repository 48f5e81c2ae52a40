//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation as a node holding its value
//! and the indices of its inputs. [`Tape::backward`] runs a single reverse
//! sweep from a scalar node, accumulating adjoints, and finally adds the
//! adjoints of parameter leaves into the [`ParamSet`] gradient buffers.
//!
//! The primitive set is deliberately small; everything differentiable in the
//! network (attention, context normalization, Sinkhorn, the losses) is
//! composed from these ops. Each backward rule is hand-derived and checked
//! against finite differences in the test module below.

use crate::error::{Error, Result};
use crate::tensorcore::matrix::{sigmoid, Matrix};
use crate::tensorcore::params::{ParamId, ParamSet};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

// Every op records its full operand provenance for debugging, even the
// fields backward has no use for (StopGradient's source, AddConst's
// constant, SliceCols' width).
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    StopGradient(usize),
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    /// x (n x d) + broadcast of r (1 x d) to every row.
    AddRowBroadcast(usize, usize),
    /// x (n x d) + broadcast of c (n x 1) to every column.
    AddColBroadcast(usize, usize),
    /// x (n x d) * broadcast of r (1 x d).
    MulRowBroadcast(usize, usize),
    /// Diag(w) * x for w (n x 1): row i scaled by w_i.
    ScaleRows(usize, usize),
    Transpose(usize),
    RowSoftmax(usize),
    RowLse(usize),
    ColLse(usize),
    Exp(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sqrt(usize),
    Recip(usize),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    SelectRows {
        x: usize,
        indices: Vec<usize>,
    },
    GatherEntries {
        x: usize,
        entries: Vec<(usize, usize)>,
    },
    ColMean(usize),
    SumAll(usize),
    /// Appends a dustbin row and column filled with the scalar z (a 1 x 1 node).
    AugmentDustbin {
        x: usize,
        z: usize,
    },
}

struct Node {
    value: Matrix,
    adjoint: Option<Matrix>,
    op: Op,
}

/// Records a computation graph for one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            adjoint: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Adjoint accumulated for `v` by the most recent [`Tape::backward`].
    pub fn adjoint(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].adjoint.as_ref()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId, params: &ParamSet) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    /// Identity in the forward pass; blocks gradient flow in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient(x.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b)).expect("tape matmul shapes");
        self.push(v, Op::Matmul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("tape add shapes");
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).expect("tape sub shapes");
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .hadamard(self.value(b))
            .expect("tape hadamard shapes");
        self.push(v, Op::Hadamard(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).scale(factor);
        self.push(v, Op::Scale(x.0, factor))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddConst(x.0, c))
    }

    pub fn add_row_broadcast(&mut self, x: Var, r: Var) -> Var {
        let v = self
            .value(x)
            .add_row_broadcast(self.value(r))
            .expect("tape add_row_broadcast shapes");
        self.push(v, Op::AddRowBroadcast(x.0, r.0))
    }

    pub fn add_col_broadcast(&mut self, x: Var, c: Var) -> Var {
        let v = self
            .value(x)
            .add_col_broadcast(self.value(c))
            .expect("tape add_col_broadcast shapes");
        self.push(v, Op::AddColBroadcast(x.0, c.0))
    }

    pub fn mul_row_broadcast(&mut self, x: Var, r: Var) -> Var {
        let v = self
            .value(x)
            .mul_row_broadcast(self.value(r))
            .expect("tape mul_row_broadcast shapes");
        self.push(v, Op::MulRowBroadcast(x.0, r.0))
    }

    pub fn scale_rows(&mut self, x: Var, w: Var) -> Var {
        let v = self
            .value(x)
            .scale_rows(self.value(w))
            .expect("tape scale_rows shapes");
        self.push(v, Op::ScaleRows(x.0, w.0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x.0))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x).row_softmax();
        self.push(v, Op::RowSoftmax(x.0))
    }

    pub fn row_logsumexp(&mut self, x: Var) -> Var {
        let v = self.value(x).row_logsumexp();
        self.push(v, Op::RowLse(x.0))
    }

    pub fn col_logsumexp(&mut self, x: Var) -> Var {
        let v = self.value(x).col_logsumexp();
        self.push(v, Op::ColLse(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).exp();
        self.push(v, Op::Exp(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).relu();
        self.push(v, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).sigmoid();
        self.push(v, Op::Sigmoid(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).softplus();
        self.push(v, Op::Softplus(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::sqrt);
        self.push(v, Op::Sqrt(x.0))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::recip);
        self.push(v, Op::Recip(x.0))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_cols(start, len)
            .expect("tape slice_cols bounds");
        self.push(v, Op::SliceCols { x: x.0, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_cols(&mats).expect("tape concat_cols shapes");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let v = self
            .value(x)
            .select_rows(indices)
            .expect("tape select_rows bounds");
        self.push(
            v,
            Op::SelectRows {
                x: x.0,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn gather_entries(&mut self, x: Var, entries: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            data.push(xv.at(r, c));
        }
        let v = Matrix::col_vector(&data);
        self.push(
            v,
            Op::GatherEntries {
                x: x.0,
                entries: entries.to_vec(),
            },
        )
    }

    pub fn col_mean(&mut self, x: Var) -> Var {
        let v = self.value(x).col_mean();
        self.push(v, Op::ColMean(x.0))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x.0))
    }

    pub fn augment_dustbin(&mut self, x: Var, z: Var) -> Var {
        let xv = self.value(x);
        let zv = self.value(z);
        debug_assert_eq!(zv.shape(), (1, 1), "dustbin score must be 1x1");
        let z0 = zv.scalar_value();
        let (n, m) = xv.shape();
        let mut out = Matrix::filled(n + 1, m + 1, z0);
        for i in 0..n {
            out.row_mut(i)[..m].copy_from_slice(xv.row(i));
        }
        self.push(out, Op::AugmentDustbin { x: x.0, z: z.0 })
    }

    fn accumulate(&mut self, idx: usize, delta: Matrix) {
        match &mut self.nodes[idx].adjoint {
            Some(a) => a.add_assign(&delta).expect("adjoint shapes agree"),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar node. Adjoints of parameter leaves are
    /// added into the gradient buffers of `params`, so repeated calls
    /// accumulate (callers typically `zero_grads` between steps).
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::contract(
                "Tape::backward",
                format!(
                    "backward root must be scalar, got {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        self.nodes[loss.0].adjoint = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].adjoint.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Constant | Op::Param(_) | Op::StopGradient(_) => {
                    // StopGradient intentionally drops its adjoint.
                }
                Op::Matmul(a, b) => {
                    let da = g
                        .matmul(&self.nodes[b].value.transpose())
                        .expect("matmul backward");
                    let db = self.nodes[a]
                        .value
                        .transpose()
                        .matmul(&g)
                        .expect("matmul backward");
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    let da = g.hadamard(&self.nodes[b].value).expect("hadamard backward");
                    let db = g.hadamard(&self.nodes[a].value).expect("hadamard backward");
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale(x, f) => self.accumulate(x, g.scale(f)),
                Op::AddConst(x, _) => self.accumulate(x, g),
                Op::AddRowBroadcast(x, r) => {
                    self.accumulate(r, Matrix::row_vector(&g.col_sums()));
                    self.accumulate(x, g);
                }
                Op::AddColBroadcast(x, c) => {
                    self.accumulate(c, Matrix::col_vector(&g.row_sums()));
                    self.accumulate(x, g);
                }
                Op::MulRowBroadcast(x, r) => {
                    let gx = g
                        .mul_row_broadcast(&self.nodes[r].value)
                        .expect("mul_row_broadcast backward");
                    let gr = g.hadamard(&self.nodes[x].value).expect("backward").col_sums();
                    self.accumulate(x, gx);
                    self.accumulate(r, Matrix::row_vector(&gr));
                }
                Op::ScaleRows(x, w) => {
                    let gx = g
                        .scale_rows(&self.nodes[w].value)
                        .expect("scale_rows backward");
                    let gw = g.hadamard(&self.nodes[x].value).expect("backward").row_sums();
                    self.accumulate(x, gx);
                    self.accumulate(w, Matrix::col_vector(&gw));
                }
                Op::Transpose(x) => self.accumulate(x, g.transpose()),
                Op::RowSoftmax(x) => {
                    // dx_ij = y_ij * (g_ij - sum_k g_ik y_ik)
                    let y = &self.nodes[i].value;
                    let mut dx = g.hadamard(y).expect("softmax backward");
                    let dots = dx.row_sums();
                    for r in 0..dx.rows() {
                        let d = dots[r];
                        for (o, &yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= d * yv;
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::RowLse(x) => {
                    // dx_ij = g_i * exp(x_ij - lse_i)
                    let y = &self.nodes[i].value;
                    let xv = &self.nodes[x].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let gi = g.at(r, 0);
                        let lse = y.at(r, 0);
                        for (o, &xe) in dx.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *o = gi * (xe - lse).exp();
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::ColLse(x) => {
                    // dx_ij = g_j * exp(x_ij - lse_j)
                    let y = &self.nodes[i].value;
                    let xv = &self.nodes[x].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for c in 0..xv.cols() {
                            dx.set(r, c, g.at(0, c) * (xv.at(r, c) - y.at(0, c)).exp());
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Exp(x) => {
                    let dx = g.hadamard(&self.nodes[i].value).expect("exp backward");
                    self.accumulate(x, dx);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x].value;
                    let mut dx = g.clone();
                    for (o, &xe) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if xe <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let dx = Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                        let s = y.at(r, c);
                        g.at(r, c) * s * (1.0 - s)
                    });
                    self.accumulate(x, dx);
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x].value;
                    let dx = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| {
                        g.at(r, c) * sigmoid(xv.at(r, c))
                    });
                    self.accumulate(x, dx);
                }
                Op::Sqrt(x) => {
                    let y = &self.nodes[i].value;
                    let dx = Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                        g.at(r, c) / (2.0 * y.at(r, c))
                    });
                    self.accumulate(x, dx);
                }
                Op::Recip(x) => {
                    let y = &self.nodes[i].value;
                    let dx = Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                        let yv = y.at(r, c);
                        -g.at(r, c) * yv * yv
                    });
                    self.accumulate(x, dx);
                }
                Op::SliceCols { x, start, len: _ } => {
                    let xv = &self.nodes[x].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            dx.set(r, start + c, g.at(r, c));
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[p].value.cols();
                        let gp = g.slice_cols(start, w).expect("concat backward");
                        self.accumulate(p, gp);
                        start += w;
                    }
                }
                Op::SelectRows { x, indices } => {
                    let xv = &self.nodes[x].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (out_r, &src) in indices.iter().enumerate() {
                        for (o, &ge) in dx.row_mut(src).iter_mut().zip(g.row(out_r)) {
                            *o += ge;
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::GatherEntries { x, entries } => {
                    let xv = &self.nodes[x].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        dx.set(r, c, dx.at(r, c) + g.at(k, 0));
                    }
                    self.accumulate(x, dx);
                }
                Op::ColMean(x) => {
                    let xv = &self.nodes[x].value;
                    let n = xv.rows().max(1) as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for (o, &ge) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = ge / n;
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::SumAll(x) => {
                    let xv = &self.nodes[x].value;
                    let dx = Matrix::filled(xv.rows(), xv.cols(), g.scalar_value());
                    self.accumulate(x, dx);
                }
                Op::AugmentDustbin { x, z } => {
                    let (n, m) = self.nodes[x].value.shape();
                    let mut dx = Matrix::zeros(n, m);
                    for r in 0..n {
                        dx.row_mut(r).copy_from_slice(&g.row(r)[..m]);
                    }
                    // z fills the last row, the last column, and the corner.
                    let mut dz = g.row(n).iter().sum::<f64>();
                    for r in 0..n {
                        dz += g.at(r, m);
                    }
                    self.accumulate(x, dx);
                    self.accumulate(z, Matrix::scalar(dz));
                }
            }
        }

        for i in 0..self.nodes.len() {
            if let Op::Param(id) = self.nodes[i].op {
                if let Some(adj) = self.nodes[i].adjoint.clone() {
                    params.accumulate_grad(id, &adj)?;
                }
            }
        }
        Ok(())
    }
}
