//! Network forward pass: embedding, weighted attention, processing units,
//! and the two-stage pipeline ending in Sinkhorn assignment.
//!
//! Every building block is generic over an [`Engine`], so the same code
//! runs eagerly for inference/benchmarks and on the tape for training. The
//! generic entry points take the parameter *layout* (tensor ids) while the
//! engine supplies the values, which lets gradient checks rerun the forward
//! against a perturbed [`crate::tensorcore::params::ParamSet`] without
//! touching the model struct. The public operations at the bottom validate
//! their inputs and then run the eager engine.

use std::time::Instant;

use crate::assignment::{sinkhorn_log_generic, AssignmentMatrix};
use crate::error::{Error, Result};
use crate::seeding::{default_seed_count, initial_seeds, reseed, KeypointSet, SeedSet};
use crate::sgnn::weights::{
    AttentionIds, CnIds, LinearIds, MlpIds, ModelLayout, ModelShape, ModelWeights, UnitIds,
};
use crate::tensorcore::engine::{Eager, Engine};
use crate::tensorcore::matrix::Matrix;

/// Epsilon inside the context-normalization standard deviation.
const CN_EPS: f64 = 1e-6;

/// Per-seed inlier probabilities γ, each in [0,1].
pub type InlierScores = Vec<f64>;

/// Which attention site produced a score matrix. Pooling and unpooling
/// scores must be k×n / n×k — the sparse structure the cost model counts
/// on — and the recorded shapes let tests assert that structurally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnRole {
    Pool,
    SelfFilter,
    CrossFilter,
    Unpool,
}

/// Shape of one attention score matrix, recorded at trace time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub role: AttnRole,
    pub rows: usize,
    pub cols: usize,
}

/// Forward-pass configuration.
#[derive(Debug, Clone)]
pub struct ForwardConfig {
    /// Seeds to request; `None` uses round(128·min(n,m)/2000), floored at 8.
    pub seed_count: Option<usize>,
    /// Sinkhorn iterations for the reseeding assignment M_r.
    pub sinkhorn_reseed: usize,
    /// Sinkhorn iterations for the final assignment M_f.
    pub sinkhorn_final: usize,
    /// Scale attention logits by 1/√(d/h).
    pub attention_scaling: bool,
    /// Stop gradients at the stage boundary (training schedule).
    pub block_stage_gradient: bool,
    /// Pin these seeds for both stages, skipping seeding and reseeding.
    pub seed_override: Option<SeedSet>,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            seed_count: None,
            sinkhorn_reseed: 10,
            sinkhorn_final: 100,
            attention_scaling: true,
            block_stage_gradient: false,
            seed_override: None,
        }
    }
}

/// Wall-clock split of one forward pass, in seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimings {
    pub seeding: f64,
    pub network: f64,
    pub sinkhorn: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.seeding + self.network + self.sinkhorn
    }
}

/// Engine-generic forward result; values are tape nodes when training.
pub struct StagedForward<T> {
    pub log_m_reseed: T,
    pub log_m_final: T,
    /// One k×1 logit vector per unit, in execution order.
    pub gamma_logits: Vec<T>,
    /// The matching sigmoid outputs.
    pub gammas: Vec<T>,
    pub seeds_initial: SeedSet,
    pub seeds_refined: SeedSet,
    pub attn_shapes: Vec<AttnShape>,
    pub timings: PhaseTimings,
}

/// Eager forward result.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Intermediate assignment used for reseeding.
    pub m_reseed: AssignmentMatrix,
    /// Final assignment.
    pub m_final: AssignmentMatrix,
    /// One γ vector per processing unit, in execution order.
    pub gammas: Vec<InlierScores>,
    pub seeds_initial: SeedSet,
    pub seeds_refined: SeedSet,
    /// Every attention score-matrix shape, in execution order.
    pub attn_shapes: Vec<AttnShape>,
    pub timings: PhaseTimings,
    /// Matmul multiply-adds spent (cost-model validation).
    pub madds: u128,
}

pub fn linear_generic<E: Engine>(eng: &mut E, x: &E::T, ids: &LinearIds) -> E::T {
    let w = eng.param(ids.w);
    let b = eng.param(ids.b);
    let xw = eng.matmul(x, &w);
    eng.add_row_broadcast(&xw, &b)
}

pub fn mlp_generic<E: Engine>(eng: &mut E, x: &E::T, ids: &MlpIds) -> E::T {
    let h = linear_generic(eng, x, &ids.l1);
    let h = eng.relu(&h);
    linear_generic(eng, &h, &ids.l2)
}

/// Weighted multi-head attention with residual MLP:
/// out = X + MLP(X ‖ Δ), Δ_h = softmax(Q_h K_hᵀ / √(d/h)) · (Diag(w) V)_h.
#[allow(clippy::too_many_arguments)]
pub fn att_generic<E: Engine>(
    eng: &mut E,
    ids: &AttentionIds,
    x: &E::T,
    y: &E::T,
    w: &E::T,
    heads: usize,
    scaled: bool,
    role: AttnRole,
    log: &mut Vec<AttnShape>,
) -> E::T {
    let (_, d) = eng.shape(x);
    let dh = d / heads;
    let q = linear_generic(eng, x, &ids.q);
    let k = linear_generic(eng, y, &ids.k);
    let v = linear_generic(eng, y, &ids.v);
    let vw = eng.scale_rows(&v, w);

    let mut deltas = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = eng.slice_cols(&q, h * dh, dh);
        let kh = eng.slice_cols(&k, h * dh, dh);
        let vh = eng.slice_cols(&vw, h * dh, dh);
        let kht = eng.transpose(&kh);
        let mut scores = eng.matmul(&qh, &kht);
        if scaled {
            scores = eng.scale(&scores, 1.0 / (dh as f64).sqrt());
        }
        let (sr, sc) = eng.shape(&scores);
        log.push(AttnShape {
            role,
            rows: sr,
            cols: sc,
        });
        let attn = eng.row_softmax(&scores);
        deltas.push(eng.matmul(&attn, &vh));
    }
    let delta = eng.concat_cols(&deltas);
    let cat = eng.concat_cols(&[x.clone(), delta]);
    let update = mlp_generic(eng, &cat, &ids.mlp);
    eng.add(x, &update)
}

/// The stacked context-normalization branch: per-block linear → CN over
/// the k seeds → scale/shift → ReLU, then the d→1 logit head.
pub fn cn_generic<E: Engine>(eng: &mut E, ids: &CnIds, fused: &E::T) -> E::T {
    let mut x = fused.clone();
    for block in &ids.blocks {
        x = linear_generic(eng, &x, &block.linear);
        let mean = eng.col_mean(&x);
        let neg_mean = eng.scale(&mean, -1.0);
        let centered = eng.add_row_broadcast(&x, &neg_mean);
        let squared = eng.hadamard(&centered, &centered);
        let var = eng.col_mean(&squared);
        let var_eps = eng.add_const(&var, CN_EPS);
        let std = eng.sqrt(&var_eps);
        let inv_std = eng.recip(&std);
        let normed = eng.mul_row_broadcast(&centered, &inv_std);
        let scale = eng.param(block.scale);
        let shift = eng.param(block.shift);
        let scaled = eng.mul_row_broadcast(&normed, &scale);
        let shifted = eng.add_row_broadcast(&scaled, &shift);
        x = eng.relu(&shifted);
    }
    linear_generic(eng, &x, &ids.head)
}

pub(crate) fn ones<E: Engine>(eng: &mut E, len: usize) -> E::T {
    eng.constant(Matrix::filled(len, 1, 1.0))
}

/// One processing unit: attentional pooling → seed filtering → weighted
/// attentional unpooling. Returns updated features plus γ (probabilities
/// and raw logits).
#[allow(clippy::too_many_arguments)]
pub fn unit_forward_generic<E: Engine>(
    eng: &mut E,
    unit: &UnitIds,
    f_a: &E::T,
    f_b: &E::T,
    seeds: &SeedSet,
    heads: usize,
    scaled: bool,
    log: &mut Vec<AttnShape>,
) -> (E::T, E::T, E::T, E::T) {
    let (n_a, d) = eng.shape(f_a);
    let (n_b, _) = eng.shape(f_b);
    let k = seeds.len();

    // Pooling: the seeds of each image query their own full graph.
    let s1_a = eng.select_rows(f_a, &seeds.indices_a);
    let s1_b = eng.select_rows(f_b, &seeds.indices_b);
    let w_a = ones(eng, n_a);
    let w_b = ones(eng, n_b);
    let before = log.len();
    let s2_a = att_generic(eng, &unit.pool, &s1_a, f_a, &w_a, heads, scaled, AttnRole::Pool, log);
    let s2_b = att_generic(eng, &unit.pool, &s1_b, f_b, &w_b, heads, scaled, AttnRole::Pool, log);
    debug_assert!(log[before..]
        .iter()
        .all(|s| s.rows == k && (s.cols == n_a || s.cols == n_b)));

    // Fusion: per-match channel concatenation, MLP, split back.
    let fused = eng.concat_cols(&[s2_a, s2_b]);
    let s3 = mlp_generic(eng, &fused, &unit.fusion);
    let s3_a = eng.slice_cols(&s3, 0, d);
    let s3_b = eng.slice_cols(&s3, d, d);

    // Filtering: self then cross attention among the seeds.
    let w_k = ones(eng, k);
    let s4_a = att_generic(eng, &unit.self_att, &s3_a, &s3_a, &w_k, heads, scaled, AttnRole::SelfFilter, log);
    let s4_b = att_generic(eng, &unit.self_att, &s3_b, &s3_b, &w_k, heads, scaled, AttnRole::SelfFilter, log);
    let s5_a = att_generic(eng, &unit.cross_att, &s4_a, &s4_b, &w_k, heads, scaled, AttnRole::CrossFilter, log);
    let s5_b = att_generic(eng, &unit.cross_att, &s4_b, &s4_a, &w_k, heads, scaled, AttnRole::CrossFilter, log);

    // Inlier scores from the fused filtered seeds.
    let s5 = eng.concat_cols(&[s5_a.clone(), s5_b.clone()]);
    let gamma_logits = cn_generic(eng, &unit.cn, &s5);
    let gamma = eng.sigmoid(&gamma_logits);

    // Unpooling: every keypoint retrieves from the γ-weighted seeds.
    let before = log.len();
    let f_a_next = att_generic(eng, &unit.unpool, f_a, &s5_a, &gamma, heads, scaled, AttnRole::Unpool, log);
    let f_b_next = att_generic(eng, &unit.unpool, f_b, &s5_b, &gamma, heads, scaled, AttnRole::Unpool, log);
    debug_assert!(log[before..]
        .iter()
        .all(|s| s.cols == k && (s.rows == n_a || s.rows == n_b)));

    (f_a_next, f_b_next, gamma, gamma_logits)
}

/// ⁰F = descriptors + MLP(coords).
pub fn embed_generic<E: Engine>(eng: &mut E, embed: &MlpIds, kp: &KeypointSet) -> E::T {
    let p = eng.constant(kp.coords().clone());
    let d = eng.constant(kp.descriptors().clone());
    let pe = mlp_generic(eng, &p, embed);
    eng.add(&d, &pe)
}

/// Full two-stage forward pass, generic over the engine. `layout` names the
/// parameter tensors; their values come from the engine's parameter set.
pub fn forward_generic<E: Engine>(
    eng: &mut E,
    shape: ModelShape,
    layout: &ModelLayout,
    a: &KeypointSet,
    b: &KeypointSet,
    config: &ForwardConfig,
) -> Result<StagedForward<E::T>> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Unseedable(format!(
            "cannot match empty keypoint sets ({n} and {m} keypoints)"
        )));
    }
    let d = shape.d;
    if a.descriptor_width() != d || b.descriptor_width() != d {
        return Err(Error::Config(format!(
            "descriptor width {}/{} does not match model feature width {d} \
             (no input projection is configured)",
            a.descriptor_width(),
            b.descriptor_width()
        )));
    }
    if config.sinkhorn_reseed == 0 || config.sinkhorn_final == 0 {
        return Err(Error::Config("sinkhorn iteration counts must be >= 1".into()));
    }
    let k = match config.seed_count {
        Some(0) => return Err(Error::Config("seed count must be >= 1".into())),
        Some(k) => k,
        None => default_seed_count(n.min(m)),
    };

    let mut timings = PhaseTimings::default();
    let t = Instant::now();
    let seeds_initial = match &config.seed_override {
        Some(ov) => {
            if ov.is_empty() {
                return Err(Error::Config("seed override must contain at least one seed".into()));
            }
            SeedSet::new(
                ov.indices_a.clone(),
                ov.indices_b.clone(),
                ov.scores.clone(),
                n,
                m,
            )?
        }
        None => initial_seeds(a, b, k)?,
    };
    timings.seeding += t.elapsed().as_secs_f64();

    let heads = shape.heads;
    let scaled = config.attention_scaling;
    let mut log = Vec::new();
    let mut gammas = Vec::new();
    let mut gamma_logits = Vec::new();

    let t = Instant::now();
    let mut f_a = embed_generic(eng, &layout.embed, a);
    let mut f_b = embed_generic(eng, &layout.embed, b);
    for unit in &layout.units[..shape.initial_units] {
        let (na, nb, g, gl) =
            unit_forward_generic(eng, unit, &f_a, &f_b, &seeds_initial, heads, scaled, &mut log);
        f_a = na;
        f_b = nb;
        gammas.push(g);
        gamma_logits.push(gl);
    }
    let z = eng.param(layout.z);
    let f_b_t = eng.transpose(&f_b);
    let corr_r = eng.matmul(&f_a, &f_b_t);
    let c_hat_r = eng.augment_dustbin(&corr_r, &z);
    timings.network += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let log_m_reseed = sinkhorn_log_generic(eng, &c_hat_r, config.sinkhorn_reseed);
    timings.sinkhorn += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let seeds_refined = if config.seed_override.is_some() {
        seeds_initial.clone()
    } else {
        let m_r = AssignmentMatrix::from_values(eng.value(&log_m_reseed).exp())?;
        let reseeded = reseed(&m_r, k, a.coords(), b.coords());
        if reseeded.is_empty() {
            seeds_initial.clone()
        } else {
            reseeded
        }
    };
    timings.seeding += t.elapsed().as_secs_f64();

    let t = Instant::now();
    if config.block_stage_gradient {
        f_a = eng.stop_gradient(&f_a);
        f_b = eng.stop_gradient(&f_b);
    }
    for unit in &layout.units[shape.initial_units..] {
        let (na, nb, g, gl) =
            unit_forward_generic(eng, unit, &f_a, &f_b, &seeds_refined, heads, scaled, &mut log);
        f_a = na;
        f_b = nb;
        gammas.push(g);
        gamma_logits.push(gl);
    }
    let f_b_t = eng.transpose(&f_b);
    let corr_f = eng.matmul(&f_a, &f_b_t);
    let c_hat_f = eng.augment_dustbin(&corr_f, &z);
    timings.network += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let log_m_final = sinkhorn_log_generic(eng, &c_hat_f, config.sinkhorn_final);
    timings.sinkhorn += t.elapsed().as_secs_f64();

    Ok(StagedForward {
        log_m_reseed,
        log_m_final,
        gamma_logits,
        gammas,
        seeds_initial,
        seeds_refined,
        attn_shapes: log,
        timings,
    })
}

fn column_to_vec(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| m.at(i, 0)).collect()
}

/// Runs the full pipeline eagerly: embed → seed → initial units →
/// reseeding assignment → reseed → refinement units → final assignment.
pub fn forward(
    a: &KeypointSet,
    b: &KeypointSet,
    model: &ModelWeights,
    config: &ForwardConfig,
) -> Result<ForwardOutput> {
    let mut eng = Eager::new(&model.params);
    let staged = forward_generic(&mut eng, model.shape, &model.layout, a, b, config)?;
    Ok(ForwardOutput {
        m_reseed: AssignmentMatrix::from_values(staged.log_m_reseed.exp())?,
        m_final: AssignmentMatrix::from_values(staged.log_m_final.exp())?,
        gammas: staged.gammas.iter().map(column_to_vec).collect(),
        seeds_initial: staged.seeds_initial,
        seeds_refined: staged.seeds_refined,
        attn_shapes: staged.attn_shapes,
        timings: staged.timings,
        madds: eng.madds,
    })
}

fn check_feature(name: &'static str, f: &Matrix, d: usize) -> Result<()> {
    if f.cols() != d {
        return Err(Error::BadShape {
            op: name,
            rows: f.rows(),
            cols: f.cols(),
            reason: format!("feature width must equal model d = {d}"),
        });
    }
    if !f.all_finite() {
        return Err(Error::NonFinite(name));
    }
    Ok(())
}

/// Positional embedding: ⁰F = descriptors + MLP(coords).
pub fn embed_positions(kp: &KeypointSet, model: &ModelWeights) -> Result<Matrix> {
    if kp.descriptor_width() != model.shape.d {
        return Err(Error::Config(format!(
            "descriptor width {} does not match model feature width {} \
             (no input projection is configured)",
            kp.descriptor_width(),
            model.shape.d
        )));
    }
    let mut eng = Eager::new(&model.params);
    Ok(embed_generic(&mut eng, &model.layout.embed, kp))
}

/// Weighted attentional aggregation through one attention block of the
/// model: out = X + MLP(X ‖ Δ) with Δ = softmax(QKᵀ/√(d/h)) Diag(w) V.
pub fn weighted_attention(
    x: &Matrix,
    y: &Matrix,
    w: &[f64],
    model: &ModelWeights,
    ids: &AttentionIds,
    scaled: bool,
) -> Result<Matrix> {
    check_feature("weighted_attention", x, model.shape.d)?;
    check_feature("weighted_attention", y, model.shape.d)?;
    if w.len() != y.rows() {
        return Err(Error::contract(
            "weighted_attention",
            format!("weight vector length {} != {} source rows", w.len(), y.rows()),
        ));
    }
    if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::contract(
            "weighted_attention",
            "weights must be finite and non-negative",
        ));
    }
    let mut eng = Eager::new(&model.params);
    let wv = eng.constant(Matrix::col_vector(w));
    let mut log = Vec::new();
    Ok(att_generic(
        &mut eng,
        ids,
        x,
        y,
        &wv,
        model.shape.heads,
        scaled,
        AttnRole::Pool,
        &mut log,
    ))
}

/// Attentional pooling of one unit: gather seed features, let them attend
/// to their full graphs, and fuse the two sides through the fusion MLP.
pub fn attentional_pooling(
    f_a: &Matrix,
    f_b: &Matrix,
    seeds: &SeedSet,
    model: &ModelWeights,
    unit: &UnitIds,
) -> Result<(Matrix, Matrix)> {
    check_feature("attentional_pooling", f_a, model.shape.d)?;
    check_feature("attentional_pooling", f_b, model.shape.d)?;
    if seeds.is_empty() {
        return Err(Error::contract(
            "attentional_pooling",
            "seed set is empty; pooling needs at least one seed",
        ));
    }
    SeedSet::new(
        seeds.indices_a.clone(),
        seeds.indices_b.clone(),
        seeds.scores.clone(),
        f_a.rows(),
        f_b.rows(),
    )?;
    let d = model.shape.d;
    let heads = model.shape.heads;
    let mut eng = Eager::new(&model.params);
    let mut log = Vec::new();
    let s1_a = eng.select_rows(f_a, &seeds.indices_a);
    let s1_b = eng.select_rows(f_b, &seeds.indices_b);
    let w_a = ones(&mut eng, f_a.rows());
    let w_b = ones(&mut eng, f_b.rows());
    let s2_a = att_generic(&mut eng, &unit.pool, &s1_a, f_a, &w_a, heads, true, AttnRole::Pool, &mut log);
    let s2_b = att_generic(&mut eng, &unit.pool, &s1_b, f_b, &w_b, heads, true, AttnRole::Pool, &mut log);
    let fused = eng.concat_cols(&[s2_a, s2_b]);
    let s3 = mlp_generic(&mut eng, &fused, &unit.fusion);
    let s3_a = eng.slice_cols(&s3, 0, d);
    let s3_b = eng.slice_cols(&s3, d, d);
    Ok((s3_a, s3_b))
}

/// Seed filtering of one unit: self attention, cross attention, and the
/// CN branch producing inlier scores γ.
pub fn seed_filtering(
    s3_a: &Matrix,
    s3_b: &Matrix,
    model: &ModelWeights,
    unit: &UnitIds,
) -> Result<(Matrix, Matrix, InlierScores)> {
    check_feature("seed_filtering", s3_a, model.shape.d)?;
    check_feature("seed_filtering", s3_b, model.shape.d)?;
    if s3_a.rows() != s3_b.rows() {
        return Err(Error::ShapeMismatch {
            op: "seed_filtering",
            lhs_rows: s3_a.rows(),
            lhs_cols: s3_a.cols(),
            rhs_rows: s3_b.rows(),
            rhs_cols: s3_b.cols(),
        });
    }
    let heads = model.shape.heads;
    let mut eng = Eager::new(&model.params);
    let mut log = Vec::new();
    let w_k = ones(&mut eng, s3_a.rows());
    let s4_a = att_generic(&mut eng, &unit.self_att, s3_a, s3_a, &w_k, heads, true, AttnRole::SelfFilter, &mut log);
    let s4_b = att_generic(&mut eng, &unit.self_att, s3_b, s3_b, &w_k, heads, true, AttnRole::SelfFilter, &mut log);
    let s5_a = att_generic(&mut eng, &unit.cross_att, &s4_a, &s4_b, &w_k, heads, true, AttnRole::CrossFilter, &mut log);
    let s5_b = att_generic(&mut eng, &unit.cross_att, &s4_b, &s4_a, &w_k, heads, true, AttnRole::CrossFilter, &mut log);
    let s5 = eng.concat_cols(&[s5_a.clone(), s5_b.clone()]);
    let logits = cn_generic(&mut eng, &unit.cn, &s5);
    let gamma = eng.sigmoid(&logits);
    Ok((s5_a, s5_b, column_to_vec(&gamma)))
}

/// Weighted attentional unpooling: every keypoint of F retrieves context
/// from the γ-weighted seed features.
pub fn attentional_unpooling(
    f: &Matrix,
    s5: &Matrix,
    gamma: &[f64],
    model: &ModelWeights,
    unit: &UnitIds,
) -> Result<Matrix> {
    check_feature("attentional_unpooling", f, model.shape.d)?;
    check_feature("attentional_unpooling", s5, model.shape.d)?;
    if gamma.len() != s5.rows() {
        return Err(Error::contract(
            "attentional_unpooling",
            format!("gamma length {} != {} seed rows", gamma.len(), s5.rows()),
        ));
    }
    if gamma.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
        return Err(Error::contract(
            "attentional_unpooling",
            "inlier scores must lie in [0,1]",
        ));
    }
    let mut eng = Eager::new(&model.params);
    let mut log = Vec::new();
    let g = eng.constant(Matrix::col_vector(gamma));
    Ok(att_generic(
        &mut eng,
        &unit.unpool,
        f,
        s5,
        &g,
        model.shape.heads,
        true,
        AttnRole::Unpool,
        &mut log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgnn::weights::ModelShape;
    use crate::tensorcore::engine::Taped;
    use crate::tensorcore::gradcheck::{finite_difference_check, CoordSample};
    use crate::tensorcore::params::{ParamId, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model(d: usize, heads: usize, seed: u64) -> ModelWeights {
        ModelWeights::new(
            ModelShape {
                d,
                heads,
                initial_units: 2,
                refine_units: 1,
            },
            seed,
        )
        .unwrap()
    }

    fn unit_norm_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        let mut m = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..n {
            let norm: f64 = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in m.row_mut(i) {
                *x /= norm;
            }
        }
        m
    }

    fn random_kp(rng: &mut ChaCha8Rng, n: usize, d: usize) -> KeypointSet {
        KeypointSet::new(
            Matrix::from_fn(n, 2, |_, _| rng.random_range(0.0..2.0)),
            unit_norm_rows(rng, n, d),
        )
        .unwrap()
    }

    fn zero_param(model: &mut ModelWeights, id: ParamId) {
        let (rows, cols) = model.params.value(id).shape();
        model.params.set_value(id, Matrix::zeros(rows, cols)).unwrap();
    }

    // ---- independent oracles -------------------------------------------

    fn lin_oracle(x: &Matrix, p: &ParamSet, ids: &LinearIds) -> Matrix {
        x.matmul(p.value(ids.w))
            .unwrap()
            .add_row_broadcast(p.value(ids.b))
            .unwrap()
    }

    fn mlp_oracle(x: &Matrix, p: &ParamSet, ids: &MlpIds) -> Matrix {
        lin_oracle(&lin_oracle(x, p, &ids.l1).relu(), p, &ids.l2)
    }

    /// Attention computed with explicit per-entry loops (no engine ops).
    fn att_oracle(
        x: &Matrix,
        y: &Matrix,
        w: &[f64],
        p: &ParamSet,
        ids: &AttentionIds,
        heads: usize,
        scaled: bool,
    ) -> Matrix {
        let (nx, d) = x.shape();
        let ny = y.rows();
        let dh = d / heads;
        let q = lin_oracle(x, p, &ids.q);
        let k = lin_oracle(y, p, &ids.k);
        let v = lin_oracle(y, p, &ids.v);
        let mut delta = Matrix::zeros(nx, d);
        for h in 0..heads {
            for i in 0..nx {
                let mut scores = vec![0.0; ny];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                    }
                    *s = if scaled { dot / (dh as f64).sqrt() } else { dot };
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..ny {
                        acc += exps[j] / total * w[j] * v.at(j, h * dh + c);
                    }
                    delta.set(i, h * dh + c, acc);
                }
            }
        }
        let cat = Matrix::concat_cols(&[x, &delta]).unwrap();
        x.add(&mlp_oracle(&cat, p, &ids.mlp)).unwrap()
    }

    // ---- embed ----------------------------------------------------------

    #[test]
    fn embed_with_zero_mlp_equals_descriptors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = toy_model(8, 2, 1);
        for ids in [model.layout.embed.l1, model.layout.embed.l2] {
            zero_param(&mut model, ids.w);
            zero_param(&mut model, ids.b);
        }
        let kp = random_kp(&mut rng, 5, 8);
        let f = embed_positions(&kp, &model).unwrap();
        assert!(f.max_abs_diff(kp.descriptors()) == 0.0);
    }

    #[test]
    fn embed_difference_from_descriptors_is_the_position_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = toy_model(8, 2, 2);
        let kp = random_kp(&mut rng, 6, 8);
        let f = embed_positions(&kp, &model).unwrap();
        let oracle = mlp_oracle(kp.coords(), &model.params, &model.layout.embed);
        assert!(f.sub(kp.descriptors()).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn embed_matches_layer_by_layer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = toy_model(8, 2, 3);
        let kp = random_kp(&mut rng, 7, 8);
        let oracle = kp
            .descriptors()
            .add(&mlp_oracle(kp.coords(), &model.params, &model.layout.embed))
            .unwrap();
        let f = embed_positions(&kp, &model).unwrap();
        assert!(f.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn embed_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = toy_model(8, 2, 4);
        let kp = random_kp(&mut rng, 5, 16);
        assert!(matches!(embed_positions(&kp, &model), Err(Error::Config(_))));
    }

    // ---- weighted attention ----------------------------------------------

    #[test]
    fn attention_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for heads in [1usize, 2, 4] {
            let model = toy_model(8, heads, 10 + heads as u64);
            let ids = model.layout.units[0].pool;
            let x = Matrix::from_fn(2, 8, |_, _| rng.random_range(-1.0..1.0));
            let y = Matrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0)).collect();
            let got = weighted_attention(&x, &y, &w, &model, &ids, true).unwrap();
            let want = att_oracle(&x, &y, &w, &model.params, &ids, heads, true);
            assert!(got.max_abs_diff(&want) < 1e-10, "heads={heads}");

            // Unscaled variant as well.
            let got = weighted_attention(&x, &y, &w, &model, &ids, false).unwrap();
            let want = att_oracle(&x, &y, &w, &model.params, &ids, heads, false);
            assert!(got.max_abs_diff(&want) < 1e-10, "unscaled heads={heads}");
        }
    }

    #[test]
    fn attention_zero_weights_suppress_all_aggregation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = toy_model(8, 2, 11);
        let ids = model.layout.units[0].unpool;
        let x = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let got = weighted_attention(&x, &y, &[0.0; 3], &model, &ids, true).unwrap();
        // Oracle: Delta = 0, so out = X + MLP(X ‖ 0).
        let cat = Matrix::concat_cols(&[&x, &Matrix::zeros(4, 8)]).unwrap();
        let want = x.add(&mlp_oracle(&cat, &model.params, &ids.mlp)).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);

        // And the output is independent of Y entirely.
        let y2 = Matrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let got2 = weighted_attention(&x, &y2, &[0.0; 3], &model, &ids, true).unwrap();
        assert!(got.max_abs_diff(&got2) == 0.0);
    }

    #[test]
    fn attention_unit_weights_reduce_to_unweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = toy_model(8, 4, 12);
        let ids = model.layout.units[1].self_att;
        let x = Matrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let got = weighted_attention(&x, &x, &[1.0; 5], &model, &ids, true).unwrap();
        let want = att_oracle(&x, &x, &[1.0; 5], &model.params, &ids, 4, true);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn attention_rejects_bad_weights() {
        let model = toy_model(8, 2, 13);
        let ids = model.layout.units[0].pool;
        let x = Matrix::zeros(2, 8);
        let y = Matrix::zeros(3, 8);
        assert!(weighted_attention(&x, &y, &[0.5, 0.5], &model, &ids, true).is_err());
        assert!(weighted_attention(&x, &y, &[0.5, -0.1, 0.5], &model, &ids, true).is_err());
        let bad_width = Matrix::zeros(2, 4);
        assert!(weighted_attention(&bad_width, &y, &[0.5; 3], &model, &ids, true).is_err());
    }

    // ---- pooling ----------------------------------------------------------

    #[test]
    fn pooling_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = toy_model(8, 2, 14);
        let unit = &model.layout.units[0];
        let f_a = Matrix::from_fn(6, 8, |_, _| rng.random_range(-1.0..1.0));
        let f_b = Matrix::from_fn(7, 8, |_, _| rng.random_range(-1.0..1.0));
        let seeds = SeedSet::new(vec![0, 2, 4, 5], vec![1, 3, 0, 6], vec![0.9, 0.8, 0.7, 0.6], 6, 7)
            .unwrap();
        let (s3_a, s3_b) = attentional_pooling(&f_a, &f_b, &seeds, &model, unit).unwrap();

        let s1_a = f_a.select_rows(&seeds.indices_a).unwrap();
        let s1_b = f_b.select_rows(&seeds.indices_b).unwrap();
        let s2_a = att_oracle(&s1_a, &f_a, &[1.0; 6], &model.params, &unit.pool, 2, true);
        let s2_b = att_oracle(&s1_b, &f_b, &[1.0; 7], &model.params, &unit.pool, 2, true);
        let fused = Matrix::concat_cols(&[&s2_a, &s2_b]).unwrap();
        let s3 = mlp_oracle(&fused, &model.params, &unit.fusion);
        assert!(s3_a.max_abs_diff(&s3.slice_cols(0, 8).unwrap()) < 1e-10);
        assert!(s3_b.max_abs_diff(&s3.slice_cols(8, 8).unwrap()) < 1e-10);
    }

    #[test]
    fn pooling_with_zero_attention_depends_only_on_fusion_of_raw_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = toy_model(8, 2, 15);
        let pool = model.layout.units[0].pool;
        for ids in [pool.q, pool.k, pool.v, pool.mlp.l1, pool.mlp.l2] {
            zero_param(&mut model, ids.w);
            zero_param(&mut model, ids.b);
        }
        let n = 4;
        let f = Matrix::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
        let seeds = SeedSet::new((0..n).collect(), (0..n).collect(), vec![1.0; n], n, n).unwrap();
        let unit = &model.layout.units[0];
        let (s3_a, _) = attentional_pooling(&f, &f, &seeds, &model, unit).unwrap();
        let fused = Matrix::concat_cols(&[&f, &f]).unwrap();
        let want = mlp_oracle(&fused, &model.params, &unit.fusion);
        assert!(s3_a.max_abs_diff(&want.slice_cols(0, 8).unwrap()) < 1e-12);
    }

    #[test]
    fn pooling_rejects_empty_seeds() {
        let model = toy_model(8, 2, 16);
        let f = Matrix::zeros(4, 8);
        let seeds = SeedSet::default();
        assert!(attentional_pooling(&f, &f, &seeds, &model, &model.layout.units[0]).is_err());
    }

    // ---- filtering ---------------------------------------------------------

    #[test]
    fn filtering_matches_step_by_step_oracle_and_gamma_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = toy_model(8, 2, 17);
        let unit = &model.layout.units[1];
        let k = 5;
        let s3_a = Matrix::from_fn(k, 8, |_, _| rng.random_range(-1.0..1.0));
        let s3_b = Matrix::from_fn(k, 8, |_, _| rng.random_range(-1.0..1.0));
        let (s5_a, s5_b, gamma) = seed_filtering(&s3_a, &s3_b, &model, unit).unwrap();

        let ones_k = vec![1.0; k];
        let s4_a = att_oracle(&s3_a, &s3_a, &ones_k, &model.params, &unit.self_att, 2, true);
        let s4_b = att_oracle(&s3_b, &s3_b, &ones_k, &model.params, &unit.self_att, 2, true);
        let w5_a = att_oracle(&s4_a, &s4_b, &ones_k, &model.params, &unit.cross_att, 2, true);
        let w5_b = att_oracle(&s4_b, &s4_a, &ones_k, &model.params, &unit.cross_att, 2, true);
        assert!(s5_a.max_abs_diff(&w5_a) < 1e-10);
        assert!(s5_b.max_abs_diff(&w5_b) < 1e-10);

        // CN branch oracle with explicit per-channel statistics.
        let mut x = Matrix::concat_cols(&[&w5_a, &w5_b]).unwrap();
        for block in &unit.cn.blocks {
            let lin = lin_oracle(&x, &model.params, &block.linear);
            let (rows, cols) = lin.shape();
            let mut out = Matrix::zeros(rows, cols);
            for c in 0..cols {
                let col: Vec<f64> = (0..rows).map(|r| lin.at(r, c)).collect();
                let mean = col.iter().sum::<f64>() / rows as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
                let std = (var + 1e-6).sqrt();
                for r in 0..rows {
                    let normed = (col[r] - mean) / std;
                    let scaled = normed * model.params.value(block.scale).at(0, c)
                        + model.params.value(block.shift).at(0, c);
                    out.set(r, c, scaled.max(0.0));
                }
            }
            x = out;
        }
        let logits = lin_oracle(&x, &model.params, &unit.cn.head);
        for (i, &g) in gamma.iter().enumerate() {
            let want = 1.0 / (1.0 + (-logits.at(i, 0)).exp());
            assert!((g - want).abs() < 1e-10);
            assert!((0.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn filtering_symmetric_inputs_give_symmetric_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = toy_model(8, 2, 18);
        let unit = &model.layout.units[0];
        let s3 = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let (s5_a, s5_b, _) = seed_filtering(&s3, &s3, &model, unit).unwrap();
        assert!(s5_a.max_abs_diff(&s5_b) == 0.0);
    }

    #[test]
    fn filtering_single_seed_is_deterministic_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = toy_model(8, 2, 19);
        let unit = &model.layout.units[0];
        let s3_a = Matrix::from_fn(1, 8, |_, _| rng.random_range(-1.0..1.0));
        let s3_b = Matrix::from_fn(1, 8, |_, _| rng.random_range(-1.0..1.0));
        let (_, _, gamma) = seed_filtering(&s3_a, &s3_b, &model, unit).unwrap();
        assert_eq!(gamma.len(), 1);
        // k = 1: CN centers the single row to zero, so every block outputs
        // relu(shift) regardless of its input; γ depends on weights only.
        let last_shift = model.params.value(unit.cn.blocks[2].shift).relu();
        let logits = lin_oracle(&last_shift, &model.params, &unit.cn.head);
        let want = 1.0 / (1.0 + (-logits.at(0, 0)).exp());
        assert!((gamma[0] - want).abs() < 1e-12);
    }

    // ---- unpooling ----------------------------------------------------------

    #[test]
    fn unpooling_matches_attention_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = toy_model(8, 4, 20);
        let unit = &model.layout.units[2];
        let f = Matrix::from_fn(6, 8, |_, _| rng.random_range(-1.0..1.0));
        let s5 = Matrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let gamma = [0.2, 0.9, 0.5];
        let got = attentional_unpooling(&f, &s5, &gamma, &model, unit).unwrap();
        let want = att_oracle(&f, &s5, &gamma, &model.params, &unit.unpool, 4, true);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn unpooling_with_zero_gamma_ignores_seed_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = toy_model(8, 2, 21);
        let unit = &model.layout.units[0];
        let f = Matrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let s5_one = Matrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let s5_two = Matrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let out_one = attentional_unpooling(&f, &s5_one, &[0.0; 3], &model, unit).unwrap();
        let out_two = attentional_unpooling(&f, &s5_two, &[0.0; 3], &model, unit).unwrap();
        assert!(out_one.max_abs_diff(&out_two) == 0.0);
        // Delta = 0 exactly: out = F + MLP(F ‖ 0).
        let cat = Matrix::concat_cols(&[&f, &Matrix::zeros(5, 8)]).unwrap();
        let want = f.add(&mlp_oracle(&cat, &model.params, &unit.unpool.mlp)).unwrap();
        assert!(out_one.max_abs_diff(&want) < 1e-12);
    }

    /// Delta part of the attention (single head), via explicit loops.
    fn att_oracle_delta(
        x: &Matrix,
        y: &Matrix,
        w: &[f64],
        p: &ParamSet,
        ids: &AttentionIds,
    ) -> Matrix {
        let (nx, d) = x.shape();
        let ny = y.rows();
        let q = lin_oracle(x, p, &ids.q);
        let k = lin_oracle(y, p, &ids.k);
        let v = lin_oracle(y, p, &ids.v);
        Matrix::from_fn(nx, d, |i, c| {
            let scores: Vec<f64> = (0..ny)
                .map(|j| (0..d).map(|t| q.at(i, t) * k.at(j, t)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            (0..ny).map(|j| exps[j] / total * w[j] * v.at(j, c)).sum()
        })
    }

    #[test]
    fn unpooling_single_hot_gamma_broadcasts_one_seed_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = toy_model(8, 1, 22);
        let unit = &model.layout.units[0];
        let f = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let s5 = Matrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0));
        let gamma = [0.0, 1.0, 0.0];
        let got = attentional_unpooling(&f, &s5, &gamma, &model, unit).unwrap();
        let want = att_oracle(&f, &s5, &gamma, &model.params, &unit.unpool, 1, true);
        assert!(got.max_abs_diff(&want) < 1e-10);

        // With one head, every Delta row is a scalar multiple of the single
        // active seed's V row: Delta_i = softmax_i(1) * V_1.
        let delta = att_oracle_delta(&f, &s5, &gamma, &model.params, &unit.unpool);
        let v = lin_oracle(&s5, &model.params, &unit.unpool.v);
        for i in 0..4 {
            let ratio = delta.at(i, 0) / v.at(1, 0);
            for c in 0..8 {
                assert!((delta.at(i, c) - ratio * v.at(1, c)).abs() < 1e-10);
            }
        }
    }

    // ---- full forward --------------------------------------------------------

    fn fast_config() -> ForwardConfig {
        ForwardConfig {
            seed_count: Some(4),
            sinkhorn_reseed: 10,
            sinkhorn_final: 30,
            ..ForwardConfig::default()
        }
    }

    #[test]
    fn forward_shapes_and_gamma_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = toy_model(8, 2, 23);
        let a = random_kp(&mut rng, 10, 8);
        let b = random_kp(&mut rng, 12, 8);
        let out = forward(&a, &b, &model, &fast_config()).unwrap();
        assert_eq!(out.m_reseed.values().shape(), (11, 13));
        assert_eq!(out.m_final.values().shape(), (11, 13));
        assert_eq!(out.gammas.len(), 3); // one per unit, 2 + 1
        let k = out.seeds_initial.len();
        assert!((1..=4).contains(&k));
        for g in &out.gammas {
            assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // Structural cost shapes: pooling scores k'×n, unpooling n×k',
        // filtering k'×k' — never n×n.
        for s in &out.attn_shapes {
            match s.role {
                AttnRole::Pool => {
                    assert!(s.rows <= 4 && (s.cols == 10 || s.cols == 12));
                }
                AttnRole::Unpool => {
                    assert!((s.rows == 10 || s.rows == 12) && s.cols <= 4);
                }
                AttnRole::SelfFilter | AttnRole::CrossFilter => {
                    assert!(s.rows <= 4 && s.cols <= 4);
                }
            }
        }
        assert!(out.madds > 0);
        assert!(out.timings.total() > 0.0);
    }

    #[test]
    fn forward_with_zero_attention_mlps_reduces_to_embedded_correlation() {
        // Zeroing every attention block's MLP output layer makes each Att an
        // identity map, so the final features are exactly the embeddings and
        // M_f equals Sinkhorn over their correlation.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = toy_model(8, 2, 24);
        for u in 0..model.layout.units.len() {
            let unit = model.layout.units[u].clone();
            for att in [unit.pool, unit.self_att, unit.cross_att, unit.unpool] {
                zero_param(&mut model, att.mlp.l2.w);
                zero_param(&mut model, att.mlp.l2.b);
            }
        }
        let a = random_kp(&mut rng, 6, 8);
        let b = random_kp(&mut rng, 7, 8);
        let cfg = fast_config();
        let out = forward(&a, &b, &model, &cfg).unwrap();

        let f_a = embed_positions(&a, &model).unwrap();
        let f_b = embed_positions(&b, &model).unwrap();
        let corr = f_a.matmul(&f_b.transpose()).unwrap();
        let c_hat = crate::assignment::augment_dustbin(&corr, model.z_value());
        let want = crate::assignment::sinkhorn(&c_hat, cfg.sinkhorn_final).unwrap();
        assert!(out.m_final.values().max_abs_diff(want.values()) < 1e-12);
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let model = toy_model(8, 2, 25);
        let a = random_kp(&mut rng, 7, 8);
        let b = random_kp(&mut rng, 8, 8);
        let cfg = fast_config();
        let base = forward(&a, &b, &model, &cfg).unwrap();

        use rand::seq::SliceRandom;
        let mut pi: Vec<usize> = (0..7).collect();
        let mut sigma: Vec<usize> = (0..8).collect();
        pi.shuffle(&mut rng);
        sigma.shuffle(&mut rng);
        let pa = KeypointSet::new(
            a.coords().select_rows(&pi).unwrap(),
            a.descriptors().select_rows(&pi).unwrap(),
        )
        .unwrap();
        let pb = KeypointSet::new(
            b.coords().select_rows(&sigma).unwrap(),
            b.descriptors().select_rows(&sigma).unwrap(),
        )
        .unwrap();
        let perm = forward(&pa, &pb, &model, &cfg).unwrap();

        // Real block: perm.m[i][j] == base.m[pi[i]][sigma[j]].
        for i in 0..7 {
            for j in 0..8 {
                let want = base.m_final.real(pi[i], sigma[j]);
                let got = perm.m_final.real(i, j);
                assert!((got - want).abs() < 1e-9, "entry ({i},{j}): {got} vs {want}");
            }
        }
        // Dustbin vectors permute the same way.
        for i in 0..7 {
            assert!((perm.m_final.dustbin_a(i) - base.m_final.dustbin_a(pi[i])).abs() < 1e-9);
        }
        for j in 0..8 {
            assert!((perm.m_final.dustbin_b(j) - base.m_final.dustbin_b(sigma[j])).abs() < 1e-9);
        }

        // Extracted matches agree up to relabeling.
        let base_matches = crate::assignment::extract_matches(&base.m_final, 0.0).unwrap();
        let perm_matches = crate::assignment::extract_matches(&perm.m_final, 0.0).unwrap();
        let mut base_set: Vec<(usize, usize)> = base_matches.iter().map(|m| (m.a, m.b)).collect();
        let mut perm_set: Vec<(usize, usize)> =
            perm_matches.iter().map(|m| (pi[m.a], sigma[m.b])).collect();
        base_set.sort_unstable();
        perm_set.sort_unstable();
        assert_eq!(base_set, perm_set);
    }

    #[test]
    fn forward_seed_override_pins_both_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let model = toy_model(8, 2, 26);
        let a = random_kp(&mut rng, 6, 8);
        let b = random_kp(&mut rng, 6, 8);
        let seeds = SeedSet::new(vec![0, 3], vec![2, 5], vec![0.9, 0.8], 6, 6).unwrap();
        let cfg = ForwardConfig {
            seed_override: Some(seeds.clone()),
            ..fast_config()
        };
        let out = forward(&a, &b, &model, &cfg).unwrap();
        assert_eq!(out.seeds_initial, seeds);
        assert_eq!(out.seeds_refined, seeds);
    }

    #[test]
    fn forward_rejects_degenerate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let model = toy_model(8, 2, 27);
        let empty = KeypointSet::new(Matrix::zeros(0, 2), Matrix::zeros(0, 8)).unwrap();
        let ok = random_kp(&mut rng, 5, 8);
        assert!(matches!(
            forward(&empty, &ok, &model, &fast_config()),
            Err(Error::Unseedable(_))
        ));
        let wrong_width = random_kp(&mut rng, 5, 16);
        assert!(matches!(
            forward(&wrong_width, &ok, &model, &fast_config()),
            Err(Error::Config(_))
        ));
        let cfg = ForwardConfig {
            seed_count: Some(0),
            ..fast_config()
        };
        assert!(matches!(forward(&ok, &ok, &model, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn forward_gradient_passes_spot_finite_difference_check() {
        // A weighted sum of M_f entries (the plain sum is n + m by the exact
        // column marginals, hence gradient-free), FD-checked on a random
        // subset of parameter coordinates (n = m = 6, k = 3, d = 8).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = toy_model(8, 2, 28);
        let a = random_kp(&mut rng, 6, 8);
        let b = random_kp(&mut rng, 6, 8);
        let seeds = SeedSet::new(vec![0, 2, 4], vec![1, 3, 5], vec![0.9, 0.8, 0.7], 6, 6).unwrap();
        let cfg = ForwardConfig {
            seed_override: Some(seeds),
            sinkhorn_reseed: 5,
            sinkhorn_final: 8,
            seed_count: None,
            ..ForwardConfig::default()
        };
        let weights = Matrix::from_fn(7, 7, |_, _| rng.random_range(-1.0..1.0));
        let shape = model.shape;
        let layout = model.layout.clone();

        // Analytic gradients through the tape.
        let mut eng = Taped::new(&model.params);
        let staged = forward_generic(&mut eng, shape, &layout, &a, &b, &cfg).unwrap();
        let m_f = eng.exp(&staged.log_m_final);
        let wconst = eng.constant(weights.clone());
        let weighted = eng.hadamard(&m_f, &wconst);
        let loss = eng.sum_all(&weighted);
        let mut tape = eng.into_tape();
        tape.backward(loss, &mut model.params).unwrap();

        // Guard against a vacuous check (a saturated assignment would zero
        // both sides): the loss must actually be sensitive to the weights.
        let live = model
            .params
            .ids()
            .filter(|&id| model.params.grad(id).max_abs() > 1e-12)
            .count();
        assert!(
            live * 10 >= model.params.len() * 8,
            "only {live} of {} parameters carry gradient",
            model.params.len()
        );

        let outcome = finite_difference_check(
            &mut model.params,
            |params| {
                let mut eng = Eager::new(params);
                let staged = forward_generic(&mut eng, shape, &layout, &a, &b, &cfg)?;
                Ok(staged.log_m_final.exp().hadamard(&weights)?.sum())
            },
            1e-5,
            CoordSample::Random { count: 60, seed: 99 },
        )
        .unwrap();
        assert!(
            outcome.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            outcome.max_rel_err,
            outcome.worst_coord
        );
    }

    #[test]
    fn forward_stage_blocking_keeps_values_but_stops_gradients() {
        // Same instance, gradients blocked: M_f values identical; initial
        // stage parameters get gradient only through M_r-independent paths.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut model = toy_model(8, 2, 29);
        let a = random_kp(&mut rng, 6, 8);
        let b = random_kp(&mut rng, 6, 8);
        let seeds = SeedSet::new(vec![1, 3], vec![0, 2], vec![0.9, 0.8], 6, 6).unwrap();
        let base_cfg = ForwardConfig {
            seed_override: Some(seeds),
            sinkhorn_reseed: 4,
            sinkhorn_final: 6,
            ..ForwardConfig::default()
        };
        let blocked_cfg = ForwardConfig {
            block_stage_gradient: true,
            ..base_cfg.clone()
        };
        let open = forward(&a, &b, &model, &base_cfg).unwrap();
        let blocked = forward(&a, &b, &model, &blocked_cfg).unwrap();
        assert!(open.m_final.values().max_abs_diff(blocked.m_final.values()) == 0.0);

        // Gradient of a weighted sum of M_f wrt an initial-stage weight is
        // zero when blocked (the only path runs through the stage boundary).
        let weights = Matrix::from_fn(7, 7, |_, _| rng.random_range(-1.0..1.0));
        let shape = model.shape;
        let layout = model.layout.clone();
        let mut eng = Taped::new(&model.params);
        let staged = forward_generic(&mut eng, shape, &layout, &a, &b, &blocked_cfg).unwrap();
        let m_f = eng.exp(&staged.log_m_final);
        let wconst = eng.constant(weights);
        let weighted = eng.hadamard(&m_f, &wconst);
        let loss = eng.sum_all(&weighted);
        let mut tape = eng.into_tape();
        tape.backward(loss, &mut model.params).unwrap();
        let g_init = model.params.grad(layout.units[0].pool.q.w);
        assert!(g_init.max_abs() == 0.0, "blocked stage received gradient");
        // The refinement stage still learns.
        let g_ref = model.params.grad(layout.units[2].pool.q.w);
        assert!(g_ref.max_abs() > 0.0);
    }
}
