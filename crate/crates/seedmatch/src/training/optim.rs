//! Adam with adaptive-moment semantics and checkpointable state.
//!
//! The optimizer owns first/second moment estimates per parameter tensor
//! and a step counter; the learning rate is passed to each [`Adam::step`]
//! call so the schedule stays with the training loop. State serializes
//! to a binary appendix ("ADAM" magic) stored after the model weights in
//! checkpoint files, and restores bit-exactly.

use crate::bytesio::ByteCursor;
use crate::tensorcore::{Matrix, ParamSet};
use crate::{Error, Result};

/// Magic bytes of the serialized optimizer appendix.
pub const ADAM_MAGIC: &[u8; 4] = b"ADAM";
/// Current appendix format version.
pub const ADAM_VERSION: u32 = 1;

/// Adam optimizer state (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator stabilizer.
    pub epsilon: f64,
    steps: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    /// Fresh state with zero moments, shaped after `params`.
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = params
            .ids()
            .map(|id| {
                let (r, c) = params.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Completed optimizer steps (equals trained iterations when the
    /// loop steps once per iteration).
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients currently stored in `params`.
    ///
    /// Moments always advance; values move only for a nonzero learning
    /// rate, so a zero rate leaves every weight bit-identical.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!(
                "adam: learning rate must be finite and >= 0, got {lr}"
            )));
        }
        if params.len() != self.m.len() {
            return Err(Error::contract(
                "adam",
                format!("state holds {} tensors, params {}", self.m.len(), params.len()),
            ));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let ids: Vec<_> = params.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            {
                let g = params.grad(id);
                if g.shape() != self.m[idx].shape() {
                    return Err(Error::contract(
                        "adam",
                        format!("tensor {idx} shape changed since state creation"),
                    ));
                }
                for (mi, &gi) in self.m[idx].as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                }
                for (vi, &gi) in self.v[idx].as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                }
            }
            if lr > 0.0 {
                let value = params.value_mut(id).as_mut_slice();
                for ((x, &mi), &vi) in value
                    .iter_mut()
                    .zip(self.m[idx].as_slice())
                    .zip(self.v[idx].as_slice())
                {
                    *x -= lr * (mi / c1) / ((vi / c2).sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }

    /// Serializes the state as the checkpoint appendix ("ADAM" magic,
    /// version, step counter, then per-tensor shape + both moments).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&ADAM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in v.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses an appendix and checks it against the parameter set it
    /// will drive. Trailing bytes are rejected.
    pub fn from_bytes(bytes: &[u8], params: &ParamSet) -> Result<Self> {
        let mut cursor = ByteCursor::new(bytes);
        let magic = cursor.read_exact(4)?;
        if magic != ADAM_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:02x?}, want \"ADAM\"")));
        }
        let version = cursor.read_u32()?;
        if version != ADAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported optimizer appendix version {version}, want {ADAM_VERSION}"
            )));
        }
        let steps = cursor.read_u64()?;
        let count = cursor.read_u32()? as usize;
        if count != params.len() {
            return Err(Error::Format(format!(
                "optimizer appendix holds {count} tensors, model has {}",
                params.len()
            )));
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for id in params.ids() {
            let rows = cursor.read_u32()? as usize;
            let cols = cursor.read_u32()? as usize;
            if (rows, cols) != params.value(id).shape() {
                return Err(Error::Format(format!(
                    "optimizer tensor {} is {rows}x{cols}, parameter is {:?}",
                    id.index(),
                    params.value(id).shape()
                )));
            }
            let mut read_matrix = || -> Result<Matrix> {
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    data.push(cursor.read_f64()?);
                }
                Matrix::new(rows, cols, data)
            };
            m.push(read_matrix()?);
            v.push(read_matrix()?);
        }
        cursor.expect_end("optimizer appendix")?;
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps,
            m,
            v,
        })
    }
}
