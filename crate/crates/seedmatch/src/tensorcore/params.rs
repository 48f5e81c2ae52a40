//! Named trainable parameters and their gradient accumulators.
//!
//! Parameters live in a [`ParamSet`] in declaration order; that order is
//! also the canonical serialization order for weight files, so it must be
//! stable across runs. A [`ParamId`] is just an index into the set.

use crate::error::{Error, Result};
use crate::tensorcore::matrix::Matrix;

/// Stable handle for a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Parameter {
    name: String,
    value: Matrix,
    grad: Matrix,
}

/// Ordered collection of named parameters with per-parameter gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a parameter; the returned id is its position in
    /// declaration order.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    /// Replaces a parameter's value; the new value must keep the shape.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::contract(
                "ParamSet::set_value",
                format!(
                    "parameter {} has shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Adds `delta` into the gradient accumulator for `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Matrix) -> Result<()> {
        self.params[id.0].grad.add_assign(delta)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    /// True if any parameter value or gradient contains NaN/inf.
    pub fn any_non_finite(&self) -> bool {
        self.params
            .iter()
            .any(|p| !p.value.all_finite() || !p.grad.all_finite())
    }
}
