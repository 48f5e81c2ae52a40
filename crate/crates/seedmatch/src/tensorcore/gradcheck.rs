//! Finite-difference validation of analytic gradients.
//!
//! The checker assumes the caller has already run a taped forward/backward
//! so that `params` holds analytic gradients, then re-evaluates the loss
//! eagerly at perturbed parameter values and compares central differences
//! against those gradients coordinate by coordinate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensorcore::params::ParamSet;

/// Which parameter coordinates to probe.
#[derive(Debug, Clone, Copy)]
pub enum CoordSample {
    /// Every scalar in every parameter.
    All,
    /// A deterministic random subset (without replacement).
    Random { count: usize, seed: u64 },
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// `name[row,col]` of the worst coordinate.
    pub worst_coord: String,
}

/// Central-difference check of the gradients currently stored in `params`.
///
/// `loss` must be a pure function of the parameter values (same data, same
/// seeds) — it is re-evaluated at `value ± step` for each probed coordinate.
/// The relative error uses a small absolute floor so that coordinates with
/// near-zero gradient do not divide by noise:
/// `|fd - an| / max(|fd|, |an|, 1e-3)`.
pub fn finite_difference_check(
    params: &mut ParamSet,
    mut loss: impl FnMut(&ParamSet) -> Result<f64>,
    step: f64,
    coords: CoordSample,
) -> Result<GradCheckOutcome> {
    // Flatten all coordinates into (param, row, col) triples.
    let mut all = Vec::new();
    for id in params.ids() {
        let (r, c) = params.value(id).shape();
        for i in 0..r {
            for j in 0..c {
                all.push((id, i, j));
            }
        }
    }
    let selected: Vec<(crate::tensorcore::ParamId, usize, usize)> = match coords {
        CoordSample::All => all,
        CoordSample::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = count.min(all.len());
            sample(&mut rng, all.len(), n)
                .into_iter()
                .map(|i| all[i])
                .collect()
        }
    };

    let mut max_rel_err = 0.0f64;
    let mut worst_coord = String::from("(none)");
    for (id, i, j) in &selected {
        let (id, i, j) = (*id, *i, *j);
        let original = params.value(id).at(i, j);
        let analytic = params.grad(id).at(i, j);

        params.value_mut(id).set(i, j, original + step);
        let plus = loss(params)?;
        params.value_mut(id).set(i, j, original - step);
        let minus = loss(params)?;
        params.value_mut(id).set(i, j, original);

        let fd = (plus - minus) / (2.0 * step);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = format!("{}[{},{}]", params.name(id), i, j);
        }
    }

    Ok(GradCheckOutcome {
        coords_checked: selected.len(),
        max_rel_err,
        worst_coord,
    })
}
