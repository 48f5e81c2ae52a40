//! Dense self/cross attention baseline.
//!
//! One processing layer in the style of the fully-connected matching
//! networks we benchmark against: every node attends to every node of its
//! own image, then to every node of the other image. Forward-only and
//! untrained — it exists as the comparison arm of the complexity benchmark,
//! so what matters is that it shares the attention code path
//! ([`att_generic`]) with the seeded network and differs *only* in graph
//! structure: its score matrices are n×n / m×m / n×m / m×n where the seeded
//! network's are k×n / k² / n×k.

use crate::error::{Error, Result};
use crate::sgnn::net::{att_generic, ones, AttnRole, AttnShape};
use crate::sgnn::weights::{init_dense_attention, AttentionIds};
use crate::tensorcore::engine::{Eager, Engine};
use crate::tensorcore::matrix::Matrix;
use crate::tensorcore::params::ParamSet;

/// Parameters of one dense layer: a self-attention block applied within
/// each image and a cross-attention block applied in both directions, with
/// the same head/width conventions as the seeded network.
#[derive(Debug, Clone)]
pub struct DenseLayerWeights {
    /// Feature width d.
    pub d: usize,
    /// Attention head count h; divides d.
    pub heads: usize,
    pub params: ParamSet,
    pub self_att: AttentionIds,
    pub cross_att: AttentionIds,
}

impl DenseLayerWeights {
    /// Fresh layer with seeded Kaiming-uniform weights, initialized exactly
    /// like the seeded network's attention blocks.
    pub fn new(d: usize, heads: usize, seed: u64) -> Result<Self> {
        if d == 0 || heads == 0 {
            return Err(Error::Config(format!(
                "dense layer needs d >= 1 and heads >= 1, got d={d} heads={heads}"
            )));
        }
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} must divide feature width {d}"
            )));
        }
        let mut params = ParamSet::new();
        let (self_att, cross_att) = init_dense_attention(&mut params, d, seed)?;
        debug_assert_eq!(params.scalar_count(), Self::param_count(d));
        Ok(DenseLayerWeights {
            d,
            heads,
            params,
            self_att,
            cross_att,
        })
    }

    /// Closed-form scalar parameter count: two attention blocks at
    /// 3(d²+d) projections + (4d²+2d)+(2d²+d) MLP = 9d²+6d each.
    pub fn param_count(d: usize) -> usize {
        2 * (9 * d * d + 6 * d)
    }
}

/// One dense layer, generic over the engine: self-attention within each
/// image, then cross-attention across images from the post-self features,
/// each as an unweighted attention update out = X + MLP(X ‖ Δ).
pub fn dense_block_generic<E: Engine>(
    eng: &mut E,
    weights: &DenseLayerWeights,
    f_a: &E::T,
    f_b: &E::T,
    scaled: bool,
    log: &mut Vec<AttnShape>,
) -> (E::T, E::T) {
    let (n, _) = eng.shape(f_a);
    let (m, _) = eng.shape(f_b);
    let heads = weights.heads;
    let w_n = ones(eng, n);
    let w_m = ones(eng, m);
    let a1 = att_generic(eng, &weights.self_att, f_a, f_a, &w_n, heads, scaled, AttnRole::SelfFilter, log);
    let b1 = att_generic(eng, &weights.self_att, f_b, f_b, &w_m, heads, scaled, AttnRole::SelfFilter, log);
    let a2 = att_generic(eng, &weights.cross_att, &a1, &b1, &w_m, heads, scaled, AttnRole::CrossFilter, log);
    let b2 = att_generic(eng, &weights.cross_att, &b1, &a1, &w_n, heads, scaled, AttnRole::CrossFilter, log);
    (a2, b2)
}

fn check_feature(name: &'static str, f: &Matrix, d: usize) -> Result<()> {
    if f.rows() == 0 || f.cols() != d {
        return Err(Error::BadShape {
            op: name,
            rows: f.rows(),
            cols: f.cols(),
            reason: format!("features must be non-empty with width equal to layer d = {d}"),
        });
    }
    if !f.all_finite() {
        return Err(Error::NonFinite(name));
    }
    Ok(())
}

/// Runs one dense layer eagerly. Scaled attention logits (1/√(d/h)),
/// matching the seeded network's default.
pub fn dense_block(
    f_a: &Matrix,
    f_b: &Matrix,
    weights: &DenseLayerWeights,
) -> Result<(Matrix, Matrix)> {
    if f_a.cols() != f_b.cols() {
        return Err(Error::ShapeMismatch {
            op: "dense_block",
            lhs_rows: f_a.rows(),
            lhs_cols: f_a.cols(),
            rhs_rows: f_b.rows(),
            rhs_cols: f_b.cols(),
        });
    }
    check_feature("dense_block", f_a, weights.d)?;
    check_feature("dense_block", f_b, weights.d)?;
    let mut eng = Eager::new(&weights.params);
    let mut log = Vec::new();
    Ok(dense_block_generic(&mut eng, weights, f_a, f_b, true, &mut log))
}
