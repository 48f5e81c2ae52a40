//! Synthetic correspondence pairs with ground truth by construction.
//!
//! A scene of latent points in the unit square is viewed twice: image A
//! sees scene coordinates directly, image B sees them through a random
//! planar transform. A configurable fraction of points is shared between
//! the views (the rest are visible in only one image and therefore
//! unmatchable), descriptors are shared latents perturbed independently
//! per image, and an outlier fraction of the shared points keeps its
//! ground-truth pairing but has its image-B descriptor replaced by an
//! unrelated one — matchable by geometry only, invisible to descriptor
//! nearest-neighbor matching.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seeding::KeypointSet;
use crate::tensorcore::Matrix;
use crate::{Error, Result};

/// Family of planar transforms mapping scene coordinates into image B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformFamily {
    /// Random rotation, per-axis log-scale, and translation.
    RandomAffine,
    /// Affine part plus a small projective row (perspective division).
    Homography,
}

/// Configuration for one synthetic pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Keypoints per image.
    pub n_points: usize,
    /// Descriptor width (network feature dimension `d`).
    pub descriptor_dim: usize,
    /// Fraction of points visible in both images, in [0, 1].
    pub overlap: f64,
    /// Std-dev of per-image Gaussian descriptor perturbation (before
    /// re-normalization).
    pub desc_noise: f64,
    /// Std-dev of per-image Gaussian coordinate jitter, in scene units.
    pub coord_noise: f64,
    /// Fraction of shared points whose image-B descriptor is replaced by
    /// an unrelated one (still ground-truth matches), in [0, 1].
    pub outlier_fraction: f64,
    /// Transform family for image B.
    pub transform: TransformFamily,
    /// RNG seed; equal seeds give bit-identical pairs.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_points: 100,
            descriptor_dim: 32,
            overlap: 0.8,
            desc_noise: 0.05,
            coord_noise: 0.0,
            outlier_fraction: 0.0,
            transform: TransformFamily::RandomAffine,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::Config("synth: n_points must be positive".into()));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::Config("synth: descriptor_dim must be positive".into()));
        }
        for (name, v) in [("overlap", self.overlap), ("outlier_fraction", self.outlier_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth: {name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("desc_noise", self.desc_noise), ("coord_noise", self.coord_noise)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "synth: {name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth correspondence labels for one pair.
///
/// `matches` is one-to-one; the unmatchable lists are disjoint from it.
/// Indices not mentioned anywhere are unlabeled (ignored by the losses).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Matched index pairs (index in A, index in B).
    pub matches: Vec<(usize, usize)>,
    /// Image-A indices with no counterpart in B.
    pub unmatchable_a: Vec<usize>,
    /// Image-B indices with no counterpart in A.
    pub unmatchable_b: Vec<usize>,
}

impl GroundTruth {
    /// Checks internal consistency against keypoint counts `n` (image A)
    /// and `m` (image B): indices in range, the matching one-to-one, and
    /// the unmatchable lists duplicate-free and disjoint from it.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::Config(format!("ground truth: {reason}")));
        let mut seen_a = vec![false; n];
        let mut seen_b = vec![false; m];
        for &(i, j) in &self.matches {
            if i >= n || j >= m {
                return fail(format!("match ({i}, {j}) out of range for {n}x{m} keypoints"));
            }
            if seen_a[i] || seen_b[j] {
                return fail(format!("match ({i}, {j}) reuses an already-matched index"));
            }
            seen_a[i] = true;
            seen_b[j] = true;
        }
        for (side, list, seen, limit) in [
            ("A", &self.unmatchable_a, &mut seen_a, n),
            ("B", &self.unmatchable_b, &mut seen_b, m),
        ] {
            for &i in list {
                if i >= limit {
                    return fail(format!("unmatchable {side} index {i} out of range ({limit})"));
                }
                if seen[i] {
                    return fail(format!(
                        "unmatchable {side} index {i} duplicated or also matched"
                    ));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// The image-B partner of image-A keypoint `i`, if matched.
    pub fn match_of_a(&self, i: usize) -> Option<usize> {
        self.matches.iter().find(|&&(a, _)| a == i).map(|&(_, b)| b)
    }
}

/// Planar transform x ↦ (A·x + t) / (p·x + 1); affine when p = 0.
struct Transform {
    a: [[f64; 2]; 2],
    t: [f64; 2],
    p: [f64; 2],
}

impl Transform {
    fn sample(family: TransformFamily, rng: &mut ChaCha8Rng) -> Self {
        let theta: f64 = rng.random_range(-0.35..0.35);
        let (sx, sy) = (
            rng.random_range(-0.2..0.2f64).exp(),
            rng.random_range(-0.2..0.2f64).exp(),
        );
        let (cos, sin) = (theta.cos(), theta.sin());
        let a = [[cos * sx, -sin * sy], [sin * sx, cos * sy]];
        let t = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
        let p = match family {
            TransformFamily::RandomAffine => [0.0, 0.0],
            // Small projective row keeps the denominator in [0.8, 1.2]
            // over the unit square, far from the horizon line.
            TransformFamily::Homography => {
                [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]
            }
        };
        Self { a, t, p }
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.p[0] * x + self.p[1] * y + 1.0;
        (
            (self.a[0][0] * x + self.a[0][1] * y + self.t[0]) / w,
            (self.a[1][0] * x + self.a[1][1] * y + self.t[1]) / w,
        )
    }
}

/// A random unit vector: Gaussian sample, re-normalized.
fn unit_descriptor(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Perturbs a unit descriptor with Gaussian noise and re-normalizes.
fn perturb(latent: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return latent.to_vec();
    }
    loop {
        let v: Vec<f64> = latent
            .iter()
            .map(|&x| x + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Rescales coordinates so the mean pairwise distance is exactly 1.
/// Fewer than two points, or all-coincident points, are left unscaled.
fn normalize_scale(coords: &mut Matrix) {
    let n = coords.rows();
    if n < 2 {
        return;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = coords.at(i, 0) - coords.at(j, 0);
            let dy = coords.at(i, 1) - coords.at(j, 1);
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    let mean = total / (n * (n - 1)) as f64;
    if mean > 0.0 {
        let inv = 1.0 / mean;
        for v in coords.as_mut_slice() {
            *v *= inv;
        }
    }
}

/// Generates one synthetic pair with its ground truth.
///
/// Both images hold `n_points` keypoints. The first
/// `round(overlap · n_points)` indices are the shared points — ground
/// truth matches (i, i) — and the remainder of each image is filled with
/// independent points labeled unmatchable. A positive overlap that
/// rounds to zero shared points is rejected as a configuration error;
/// an overlap of exactly 0 is the legitimate all-unmatchable case.
/// Coordinates are rescaled per image to mean pairwise distance 1.
/// Equal configurations produce bit-identical pairs.
pub fn synth_pair(config: &SynthConfig) -> Result<(KeypointSet, KeypointSet, GroundTruth)> {
    config.validate()?;
    let n = config.n_points;
    let d = config.descriptor_dim;
    let shared = (config.overlap * n as f64).round() as usize;
    let shared = shared.min(n);
    if config.overlap > 0.0 && shared == 0 {
        return Err(Error::Config(format!(
            "synth: overlap {} of {n} points rounds to zero matchable points",
            config.overlap
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let transform = Transform::sample(config.transform, &mut rng);

    // Scene coordinates: shared block first, then per-image extras.
    let scene: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect();
    let extra_b: Vec<(f64, f64)> = (0..n - shared)
        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect();

    let jitter = |rng: &mut ChaCha8Rng| -> f64 {
        if config.coord_noise == 0.0 {
            0.0
        } else {
            config.coord_noise * rng.sample::<f64, _>(StandardNormal)
        }
    };
    let mut coords_a = Matrix::zeros(n, 2);
    for (i, &(x, y)) in scene.iter().enumerate() {
        coords_a.set(i, 0, x + jitter(&mut rng));
        coords_a.set(i, 1, y + jitter(&mut rng));
    }
    let mut coords_b = Matrix::zeros(n, 2);
    for i in 0..n {
        let (x, y) = if i < shared { scene[i] } else { extra_b[i - shared] };
        let (tx, ty) = transform.apply(x, y);
        coords_b.set(i, 0, tx + jitter(&mut rng));
        coords_b.set(i, 1, ty + jitter(&mut rng));
    }
    normalize_scale(&mut coords_a);
    normalize_scale(&mut coords_b);

    // Descriptors: shared latents perturbed per image; per-image extras
    // are independent draws. Outliers swap the B-side descriptor for an
    // unrelated one while keeping the ground-truth pairing.
    let latents: Vec<Vec<f64>> = (0..shared).map(|_| unit_descriptor(d, &mut rng)).collect();
    let outliers = (config.outlier_fraction * shared as f64).round() as usize;
    let outlier_set: Vec<usize> = rand::seq::index::sample(&mut rng, shared.max(1), outliers.min(shared))
        .into_iter()
        .collect();
    let mut is_outlier = vec![false; shared];
    for &i in &outlier_set {
        is_outlier[i] = true;
    }

    let mut desc_a = Matrix::zeros(n, d);
    let mut desc_b = Matrix::zeros(n, d);
    for i in 0..n {
        let row = if i < shared {
            perturb(&latents[i], config.desc_noise, &mut rng)
        } else {
            unit_descriptor(d, &mut rng)
        };
        desc_a.row_mut(i).copy_from_slice(&row);
    }
    for i in 0..n {
        let row = if i < shared && !is_outlier[i] {
            perturb(&latents[i], config.desc_noise, &mut rng)
        } else {
            unit_descriptor(d, &mut rng)
        };
        desc_b.row_mut(i).copy_from_slice(&row);
    }

    let truth = GroundTruth {
        matches: (0..shared).map(|i| (i, i)).collect(),
        unmatchable_a: (shared..n).collect(),
        unmatchable_b: (shared..n).collect(),
    };
    let a = KeypointSet::new(coords_a, desc_a)?;
    let b = KeypointSet::new(coords_b, desc_b)?;
    truth.validate(a.len(), b.len())?;
    Ok((a, b, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> SynthConfig {
        SynthConfig {
            n_points: 20,
            descriptor_dim: 8,
            overlap: 0.8,
            desc_noise: 0.05,
            coord_noise: 0.01,
            outlier_fraction: 0.0,
            transform: TransformFamily::RandomAffine,
            seed: 7,
        }
    }

    #[test]
    fn full_overlap_noise_free_pair_has_identity_ground_truth() {
        let config = SynthConfig {
            overlap: 1.0,
            desc_noise: 0.0,
            coord_noise: 0.0,
            ..base_config()
        };
        let (a, b, truth) = synth_pair(&config).unwrap();
        assert_eq!(truth.matches, (0..20).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(truth.unmatchable_a.is_empty());
        assert!(truth.unmatchable_b.is_empty());
        // Noise-free descriptors are the shared latents on both sides.
        assert_eq!(a.descriptors().as_slice(), b.descriptors().as_slice());
    }

    #[test]
    fn zero_overlap_labels_everything_unmatchable() {
        let config = SynthConfig { overlap: 0.0, ..base_config() };
        let (_, _, truth) = synth_pair(&config).unwrap();
        assert!(truth.matches.is_empty());
        assert_eq!(truth.unmatchable_a, (0..20).collect::<Vec<_>>());
        assert_eq!(truth.unmatchable_b, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn positive_overlap_rounding_to_zero_matches_is_rejected() {
        let config = SynthConfig { n_points: 4, overlap: 0.1, ..base_config() };
        let err = synth_pair(&config).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn invalid_fractions_and_sizes_are_rejected() {
        for config in [
            SynthConfig { n_points: 0, ..base_config() },
            SynthConfig { descriptor_dim: 0, ..base_config() },
            SynthConfig { overlap: 1.5, ..base_config() },
            SynthConfig { outlier_fraction: -0.1, ..base_config() },
            SynthConfig { desc_noise: -1.0, ..base_config() },
            SynthConfig { coord_noise: f64::NAN, ..base_config() },
        ] {
            assert!(matches!(synth_pair(&config).unwrap_err(), Error::Config(_)));
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_different_seed_is_not() {
        let config = base_config();
        let (a1, b1, t1) = synth_pair(&config).unwrap();
        let (a2, b2, t2) = synth_pair(&config).unwrap();
        assert_eq!(a1.coords().as_slice(), a2.coords().as_slice());
        assert_eq!(b1.coords().as_slice(), b2.coords().as_slice());
        assert_eq!(a1.descriptors().as_slice(), a2.descriptors().as_slice());
        assert_eq!(b1.descriptors().as_slice(), b2.descriptors().as_slice());
        assert_eq!(t1, t2);

        let other = SynthConfig { seed: 8, ..config };
        let (a3, _, _) = synth_pair(&other).unwrap();
        assert_ne!(a1.coords().as_slice(), a3.coords().as_slice());
    }

    #[test]
    fn coordinates_are_normalized_to_unit_mean_pairwise_distance() {
        let (a, b, _) = synth_pair(&base_config()).unwrap();
        for coords in [a.coords(), b.coords()] {
            let n = coords.rows();
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let dx = coords.at(i, 0) - coords.at(j, 0);
                        let dy = coords.at(i, 1) - coords.at(j, 1);
                        total += (dx * dx + dy * dy).sqrt();
                    }
                }
            }
            let mean = total / (n * (n - 1)) as f64;
            assert!((mean - 1.0).abs() < 1e-9, "mean pairwise distance {mean}");
        }
    }

    #[test]
    fn outliers_keep_their_match_but_lose_descriptor_similarity() {
        let config = SynthConfig {
            overlap: 1.0,
            desc_noise: 0.0,
            outlier_fraction: 0.5,
            ..base_config()
        };
        let (a, b, truth) = synth_pair(&config).unwrap();
        assert_eq!(truth.matches.len(), 20, "outliers stay ground-truth matches");
        let cosine = |i: usize| -> f64 {
            a.descriptors()
                .row(i)
                .iter()
                .zip(b.descriptors().row(i))
                .map(|(x, y)| x * y)
                .sum()
        };
        let dead = (0..20).filter(|&i| cosine(i) < 0.9).count();
        assert_eq!(dead, 10, "half the descriptors should be replaced");
    }

    #[test]
    fn homography_family_stays_finite_and_validates() {
        let config = SynthConfig {
            transform: TransformFamily::Homography,
            n_points: 50,
            seed: 33,
            ..base_config()
        };
        let (a, b, truth) = synth_pair(&config).unwrap();
        truth.validate(a.len(), b.len()).unwrap();
        assert!(b.coords().as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ground_truth_validation_rejects_inconsistent_labels() {
        let bad_range = GroundTruth { matches: vec![(5, 0)], ..Default::default() };
        assert!(bad_range.validate(3, 3).is_err());
        let dup = GroundTruth { matches: vec![(0, 1), (0, 2)], ..Default::default() };
        assert!(dup.validate(3, 3).is_err());
        let overlap = GroundTruth {
            matches: vec![(0, 0)],
            unmatchable_a: vec![0],
            ..Default::default()
        };
        assert!(overlap.validate(3, 3).is_err());
        let ok = GroundTruth {
            matches: vec![(0, 1)],
            unmatchable_a: vec![2],
            unmatchable_b: vec![0],
        };
        ok.validate(3, 3).unwrap();
    }
}
