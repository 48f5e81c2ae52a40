//! Held-out evaluation: match recovery on fresh synthetic pairs, for
//! the network and for a classical nearest-neighbor + ratio baseline.
//!
//! Both evaluators walk the same per-index data seeds, so their stats
//! compare the two matchers on identical pairs.

use crate::assignment::extract_matches;
use crate::seeding::{nn_match, KeypointSet};
use crate::sgnn::{forward, ForwardConfig, ModelWeights};
use crate::training::synth::{synth_pair, GroundTruth, SynthConfig};
use crate::training::trainer::splitmix64;
use crate::{Error, Result};

/// Micro-averaged match counts over a set of evaluation pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalStats {
    /// Pairs evaluated.
    pub pairs: usize,
    /// Ground-truth matches across all pairs.
    pub true_matches: usize,
    /// Predicted matches across all pairs.
    pub predicted: usize,
    /// Predicted matches that are ground truth.
    pub correct: usize,
}

impl EvalStats {
    /// Correct over ground truth (1 when there was nothing to find).
    pub fn recall(&self) -> f64 {
        if self.true_matches == 0 {
            1.0
        } else {
            self.correct as f64 / self.true_matches as f64
        }
    }

    /// Correct over predicted (1 when nothing was predicted).
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            1.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }

    fn tally(&mut self, predicted: impl Iterator<Item = (usize, usize)>, truth: &GroundTruth) {
        let truth_set: std::collections::HashSet<(usize, usize)> =
            truth.matches.iter().copied().collect();
        self.pairs += 1;
        self.true_matches += truth.matches.len();
        for pair in predicted {
            self.predicted += 1;
            if truth_set.contains(&pair) {
                self.correct += 1;
            }
        }
    }
}

/// Evaluates the network on `pairs` fresh synthetic pairs (data seeds
/// derived from `seed` and the pair index): forward pass, match
/// extraction at `threshold`, micro-averaged counts against ground
/// truth. The forward config serves as a template and must not pin
/// seeds.
pub fn evaluate(
    model: &ModelWeights,
    synth: &SynthConfig,
    pairs: usize,
    threshold: f64,
    config: &ForwardConfig,
    seed: u64,
) -> Result<EvalStats> {
    if config.seed_override.is_some() {
        return Err(Error::Config(
            "evaluate: seed_override cannot be pinned across evaluation pairs".into(),
        ));
    }
    let mut stats = EvalStats::default();
    for i in 0..pairs {
        let pair_synth = SynthConfig { seed: splitmix64(seed, i as u64), ..synth.clone() };
        let (a, b, truth) = synth_pair(&pair_synth)?;
        let out = forward(&a, &b, model, config)?;
        let matches = extract_matches(&out.m_final, threshold)?;
        stats.tally(matches.iter().map(|m| (m.a, m.b)), &truth);
    }
    Ok(stats)
}

/// Mutual nearest-neighbor matches passing the Lowe ratio test
/// d₁/d₂ < `ratio` (the scores returned by [`nn_match`] are 1 − d₁/d₂).
pub fn nn_baseline_matches(a: &KeypointSet, b: &KeypointSet, ratio: f64) -> Vec<(usize, usize)> {
    nn_match(a, b)
        .pairs
        .into_iter()
        .filter(|p| p.score > 1.0 - ratio)
        .map(|p| (p.a, p.b))
        .collect()
}

/// Evaluates the classical baseline on the same data seeds as
/// [`evaluate`], with ratio-test threshold `ratio` (0.8 classically).
pub fn evaluate_baseline(
    synth: &SynthConfig,
    pairs: usize,
    ratio: f64,
    seed: u64,
) -> Result<EvalStats> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "evaluate_baseline: ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let mut stats = EvalStats::default();
    for i in 0..pairs {
        let pair_synth = SynthConfig { seed: splitmix64(seed, i as u64), ..synth.clone() };
        let (a, b, truth) = synth_pair(&pair_synth)?;
        stats.tally(nn_baseline_matches(&a, &b, ratio).into_iter(), &truth);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgnn::ModelShape;
    use crate::training::synth::TransformFamily;

    fn easy_synth() -> SynthConfig {
        SynthConfig {
            n_points: 20,
            descriptor_dim: 8,
            overlap: 1.0,
            desc_noise: 0.0,
            coord_noise: 0.0,
            outlier_fraction: 0.0,
            transform: TransformFamily::RandomAffine,
            seed: 0,
        }
    }

    #[test]
    fn stats_tally_matches_hand_count() {
        let truth = GroundTruth {
            matches: vec![(0, 0), (1, 1), (2, 2)],
            ..Default::default()
        };
        let mut stats = EvalStats::default();
        stats.tally([(0, 0), (1, 2), (2, 2)].into_iter(), &truth);
        assert_eq!(stats.true_matches, 3);
        assert_eq!(stats.predicted, 3);
        assert_eq!(stats.correct, 2);
        assert!((stats.recall() - 2.0 / 3.0).abs() < 1e-15);
        assert!((stats.precision() - 2.0 / 3.0).abs() < 1e-15);

        let empty = EvalStats::default();
        assert_eq!(empty.recall(), 1.0);
        assert_eq!(empty.precision(), 1.0);
    }

    #[test]
    fn nn_baseline_is_perfect_on_noise_free_full_overlap() {
        let stats = evaluate_baseline(&easy_synth(), 5, 0.8, 42).unwrap();
        assert_eq!(stats.pairs, 5);
        assert_eq!(stats.true_matches, 100);
        assert_eq!(stats.correct, 100);
        assert_eq!(stats.predicted, 100);
    }

    #[test]
    fn descriptor_dead_outliers_cap_nn_recall() {
        // Half the matches keep only geometric identity; descriptor
        // matching cannot recover them.
        let synth = SynthConfig { outlier_fraction: 0.5, ..easy_synth() };
        let stats = evaluate_baseline(&synth, 5, 0.8, 42).unwrap();
        assert!(
            stats.recall() <= 0.55,
            "NN recall {} should be capped near the inlier fraction",
            stats.recall()
        );
        // What it does match is still mostly right.
        assert!(stats.precision() > 0.8, "precision {}", stats.precision());
    }

    #[test]
    fn evaluate_runs_the_network_and_is_deterministic() {
        let model = ModelWeights::new(
            ModelShape { d: 8, heads: 2, initial_units: 2, refine_units: 1 },
            9,
        )
        .unwrap();
        let config = ForwardConfig {
            seed_count: Some(3),
            sinkhorn_reseed: 4,
            sinkhorn_final: 6,
            ..ForwardConfig::default()
        };
        let s1 = evaluate(&model, &easy_synth(), 3, 0.2, &config, 7).unwrap();
        let s2 = evaluate(&model, &easy_synth(), 3, 0.2, &config, 7).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.pairs, 3);
        assert!(s1.correct <= s1.predicted);
        assert!(s1.correct <= s1.true_matches);

        let pinned = ForwardConfig {
            seed_override: Some(
                crate::seeding::SeedSet::new(vec![0], vec![0], vec![1.0], 20, 20).unwrap(),
            ),
            ..config
        };
        assert!(evaluate(&model, &easy_synth(), 1, 0.2, &pinned, 7).is_err());
    }
}
