//! The two-part training loss: assignment likelihood and seed-weight BCE.
//!
//! `L = L_assign(M_reseed) + L_assign(M_final) + δ · Σ_t L_weight^(t)`.
//!
//! The assignment term is the negative log-likelihood of the ground
//! truth under the augmented assignment matrix — matched pairs hit their
//! real cells, unmatchable points their dustbin cells. The weight term
//! is binary cross entropy of each unit's inlier scores against seed
//! labels, averaged over seeds and summed over units (the mean keeps the
//! δ weight meaningful across seed counts).
//!
//! Eager entry points ([`assignment_loss`], [`weight_loss`],
//! [`total_loss`]) score finished matrices; [`loss_graph`] builds the
//! same quantity on any engine so the taped path can differentiate it.
//! Probabilities are clamped to [1e-12, 1] inside the logarithms, which
//! both floors the loss and keeps it non-negative when a partially
//! converged dustbin column cell exceeds 1.

use std::collections::HashMap;

use crate::assignment::AssignmentMatrix;
use crate::seeding::SeedSet;
use crate::sgnn::{InlierScores, StagedForward};
use crate::tensorcore::{Engine, Matrix};
use crate::training::synth::GroundTruth;
use crate::{Error, Result};

/// Probability floor inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn log_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0).ln()
}

/// Negative log-likelihood of the ground truth under `m`.
///
/// Matched pairs contribute −log M\[i, j\], unmatchable image-A points
/// −log M\[i, m+1\] (their dustbin-column cell), unmatchable image-B
/// points −log M\[n+1, j\]. Empty ground truth scores 0.
pub fn assignment_loss(m: &AssignmentMatrix, truth: &GroundTruth) -> Result<f64> {
    let (n, cols) = m.real_shape();
    truth.validate(n, cols)?;
    let mut loss = 0.0;
    for &(i, j) in &truth.matches {
        loss -= log_prob(m.real(i, j));
    }
    for &i in &truth.unmatchable_a {
        loss -= log_prob(m.dustbin_a(i));
    }
    for &j in &truth.unmatchable_b {
        loss -= log_prob(m.dustbin_b(j));
    }
    Ok(loss)
}

/// Labels each seed inlier iff its index pair is a ground-truth match.
pub fn label_seeds(seeds: &SeedSet, truth: &GroundTruth) -> Vec<bool> {
    let matches: HashMap<usize, usize> = truth.matches.iter().copied().collect();
    seeds
        .pairs()
        .map(|(a, b)| matches.get(&a) == Some(&b))
        .collect()
}

/// Tolerance variant for noisy-coordinate data: a seed (a, b) is inlier
/// iff a is matched and b's image-B coordinates lie within `tolerance`
/// of the true correspondent's (a reprojection-distance test in
/// normalized units; `tolerance = 0` reduces to exact membership for
/// distinct keypoints).
pub fn label_seeds_tolerant(
    seeds: &SeedSet,
    truth: &GroundTruth,
    coords_b: &Matrix,
    tolerance: f64,
) -> Vec<bool> {
    let matches: HashMap<usize, usize> = truth.matches.iter().copied().collect();
    seeds
        .pairs()
        .map(|(a, b)| match matches.get(&a) {
            Some(&j) => {
                let dx = coords_b.at(j, 0) - coords_b.at(b, 0);
                let dy = coords_b.at(j, 1) - coords_b.at(b, 1);
                j == b || (dx * dx + dy * dy).sqrt() <= tolerance
            }
            None => false,
        })
        .collect()
}

/// Mean binary cross entropy per unit, summed over units.
///
/// `gammas[t]` holds unit t's inlier scores in (0, 1) (clamped by
/// 1e-12); `labels[t]` the corresponding booleans. The two lists must
/// agree in length at both levels.
pub fn weight_loss(gammas: &[InlierScores], labels: &[Vec<bool>]) -> Result<f64> {
    if gammas.len() != labels.len() {
        return Err(Error::contract(
            "weight_loss",
            format!("{} gamma vectors vs {} label vectors", gammas.len(), labels.len()),
        ));
    }
    let mut total = 0.0;
    for (t, (g, y)) in gammas.iter().zip(labels).enumerate() {
        if g.len() != y.len() {
            return Err(Error::contract(
                "weight_loss",
                format!("unit {t}: {} scores vs {} labels", g.len(), y.len()),
            ));
        }
        if g.is_empty() {
            continue;
        }
        let sum: f64 = g
            .iter()
            .zip(y)
            .map(|(&gamma, &label)| {
                let p = gamma.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                if label {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        total += sum / g.len() as f64;
    }
    Ok(total)
}

/// Builds one label vector per unit: the first `initial_units` units see
/// the initial seeds, the refinement units the reseeded ones.
pub fn stage_labels(
    seeds_initial: &SeedSet,
    seeds_refined: &SeedSet,
    initial_units: usize,
    total_units: usize,
    truth: &GroundTruth,
) -> Vec<Vec<bool>> {
    let first = label_seeds(seeds_initial, truth);
    let second = label_seeds(seeds_refined, truth);
    (0..total_units)
        .map(|t| if t < initial_units { first.clone() } else { second.clone() })
        .collect()
}

/// The full training objective on finished (eager) outputs:
/// `L_assign(M_reseed) + L_assign(M_final) + δ · weight_loss`.
pub fn total_loss(
    m_reseed: &AssignmentMatrix,
    m_final: &AssignmentMatrix,
    gammas: &[InlierScores],
    labels: &[Vec<bool>],
    truth: &GroundTruth,
    delta: f64,
) -> Result<f64> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::Config(format!("total_loss: delta must be finite and >= 0, got {delta}")));
    }
    Ok(assignment_loss(m_reseed, truth)?
        + assignment_loss(m_final, truth)?
        + delta * weight_loss(gammas, labels)?)
}

/// The loss terms as engine nodes: the two assignment terms, the summed
/// weight term, and `total = assign_reseed + assign_final + δ · weight`.
pub struct LossTerms<T> {
    pub assign_reseed: T,
    pub assign_final: T,
    pub weight: T,
    pub total: T,
}

/// log(clamp(exp(x), floor, 1)) in log domain: min(max(x, ln floor), 0),
/// built from two ReLUs so it differentiates.
fn clamped_log<E: Engine>(eng: &mut E, log_m: &E::T) -> E::T {
    let ln_floor = PROB_FLOOR.ln();
    let shifted = eng.add_const(log_m, -ln_floor);
    let lower = eng.relu(&shifted);
    let floored = eng.add_const(&lower, ln_floor);
    let negated = eng.scale(&floored, -1.0);
    let upper = eng.relu(&negated);
    eng.scale(&upper, -1.0)
}

/// One assignment term: −Σ clamped log M over the ground-truth cells of
/// an (n+1)×(m+1) augmented log matrix.
fn assignment_term<E: Engine>(eng: &mut E, log_m: &E::T, truth: &GroundTruth) -> E::T {
    let (rows, cols) = eng.shape(log_m);
    let (n, m) = (rows - 1, cols - 1);
    let mut cells: Vec<(usize, usize)> = truth.matches.clone();
    cells.extend(truth.unmatchable_a.iter().map(|&i| (i, m)));
    cells.extend(truth.unmatchable_b.iter().map(|&j| (n, j)));
    if cells.is_empty() {
        return eng.constant(Matrix::scalar(0.0));
    }
    let clamped = clamped_log(eng, log_m);
    let gathered = eng.gather_entries(&clamped, &cells);
    let summed = eng.sum_all(&gathered);
    eng.scale(&summed, -1.0)
}

/// Builds the training objective on any engine from a staged forward
/// pass. The weight term uses the numerically stable logit form
/// `softplus(s) − s·y`, which the eager [`weight_loss`] matches through
/// its probability clamp. Ground truth and labels must already be
/// consistent with the forward pass's shapes.
pub fn loss_graph<E: Engine>(
    eng: &mut E,
    staged: &StagedForward<E::T>,
    labels: &[Vec<bool>],
    truth: &GroundTruth,
    delta: f64,
) -> Result<LossTerms<E::T>> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::Config(format!("loss_graph: delta must be finite and >= 0, got {delta}")));
    }
    if staged.gamma_logits.len() != labels.len() {
        return Err(Error::contract(
            "loss_graph",
            format!("{} units vs {} label vectors", staged.gamma_logits.len(), labels.len()),
        ));
    }
    {
        let (rows, cols) = eng.shape(&staged.log_m_final);
        truth.validate(rows - 1, cols - 1)?;
    }

    let assign_reseed = assignment_term(eng, &staged.log_m_reseed, truth);
    let assign_final = assignment_term(eng, &staged.log_m_final, truth);

    let mut weight: Option<E::T> = None;
    for (t, (logits, y)) in staged.gamma_logits.iter().zip(labels).enumerate() {
        let (k, one) = eng.shape(logits);
        if one != 1 || k != y.len() {
            return Err(Error::contract(
                "loss_graph",
                format!("unit {t}: logits {k}x{one} vs {} labels", y.len()),
            ));
        }
        if k == 0 {
            continue;
        }
        // BCE from logits: softplus(s) − s·y, mean over the unit's seeds.
        let targets = Matrix::from_fn(k, 1, |i, _| if y[i] { 1.0 } else { 0.0 });
        let targets = eng.constant(targets);
        let sp = eng.softplus(logits);
        let sy = eng.hadamard(logits, &targets);
        let bce = eng.sub(&sp, &sy);
        let sum = eng.sum_all(&bce);
        let mean = eng.scale(&sum, 1.0 / k as f64);
        weight = Some(match weight {
            Some(acc) => eng.add(&acc, &mean),
            None => mean,
        });
    }
    let weight = weight.unwrap_or_else(|| eng.constant(Matrix::scalar(0.0)));

    let assign_sum = eng.add(&assign_reseed, &assign_final);
    let weighted = eng.scale(&weight, delta);
    let total = eng.add(&assign_sum, &weighted);
    Ok(LossTerms { assign_reseed, assign_final, weight, total })
}
