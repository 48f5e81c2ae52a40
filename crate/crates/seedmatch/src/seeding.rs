//! Seed correspondence selection.
//!
//! Seeds are the small set of reliable putative matches through which all
//! cross-image message passing flows. Initial seeds come from mutual
//! nearest-neighbor descriptor matching scored by the distance ratio test,
//! spatially spread by non-maximum suppression; refinement-stage seeds are
//! re-derived from the intermediate assignment matrix.
//!
//! Orderings are content-based throughout (score, then coordinates) so the
//! selected seed *pairs* are invariant under keypoint permutation.

use crate::assignment::AssignmentMatrix;
use crate::error::{Error, Result};
use crate::tensorcore::matrix::Matrix;

/// NMS radius factor θ: radius = θ × mean pairwise keypoint distance.
pub const NMS_THETA: f64 = 1e-2;

/// Keypoints of one image: n×2 coordinates and n×d unit-norm descriptors.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    coords: Matrix,
    descriptors: Matrix,
}

impl KeypointSet {
    /// Validates row agreement, coordinate width 2, finiteness, and unit
    /// descriptor norms (±1e-6).
    pub fn new(coords: Matrix, descriptors: Matrix) -> Result<Self> {
        if coords.cols() != 2 {
            return Err(Error::BadShape {
                op: "KeypointSet::new",
                rows: coords.rows(),
                cols: coords.cols(),
                reason: "coordinates must be n x 2".into(),
            });
        }
        if coords.rows() != descriptors.rows() {
            return Err(Error::ShapeMismatch {
                op: "KeypointSet::new",
                lhs_rows: coords.rows(),
                lhs_cols: coords.cols(),
                rhs_rows: descriptors.rows(),
                rhs_cols: descriptors.cols(),
            });
        }
        if !coords.all_finite() || !descriptors.all_finite() {
            return Err(Error::NonFinite("KeypointSet::new"));
        }
        for i in 0..descriptors.rows() {
            let norm: f64 = descriptors.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::contract(
                    "KeypointSet::new",
                    format!("descriptor {i} has L2 norm {norm}, want 1 +/- 1e-6"),
                ));
            }
        }
        Ok(KeypointSet {
            coords,
            descriptors,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn descriptors(&self) -> &Matrix {
        &self.descriptors
    }

    pub fn descriptor_width(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn coord(&self, i: usize) -> (f64, f64) {
        (self.coords.at(i, 0), self.coords.at(i, 1))
    }
}

/// One putative correspondence with its ratio-test reliability score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PutativeMatch {
    pub a: usize,
    pub b: usize,
    /// 1 − d₁/d₂ ∈ [0,1]; 1 for an exact descriptor hit, 0 for a tie
    /// between the two nearest neighbors (least reliable).
    pub score: f64,
}

/// Result of nearest-neighbor matching; `warning` is set (with an empty
/// match list) when either side is too small for the ratio test.
#[derive(Debug, Clone, Default)]
pub struct NnMatches {
    pub pairs: Vec<PutativeMatch>,
    pub warning: Option<String>,
}

/// Selected seed correspondences, sorted by non-increasing score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeedSet {
    pub indices_a: Vec<usize>,
    pub indices_b: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SeedSet {
    /// Validates equal lengths, index bounds, per-side uniqueness, and
    /// non-increasing score order.
    pub fn new(
        indices_a: Vec<usize>,
        indices_b: Vec<usize>,
        scores: Vec<f64>,
        n_a: usize,
        n_b: usize,
    ) -> Result<Self> {
        if indices_a.len() != indices_b.len() || indices_a.len() != scores.len() {
            return Err(Error::contract(
                "SeedSet::new",
                format!(
                    "length mismatch: {} / {} / {}",
                    indices_a.len(),
                    indices_b.len(),
                    scores.len()
                ),
            ));
        }
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        for (&a, &b) in indices_a.iter().zip(&indices_b) {
            if a >= n_a || b >= n_b {
                return Err(Error::contract(
                    "SeedSet::new",
                    format!("seed ({a},{b}) out of range for {n_a}/{n_b} keypoints"),
                ));
            }
            if !seen_a.insert(a) || !seen_b.insert(b) {
                return Err(Error::contract(
                    "SeedSet::new",
                    format!("duplicate index in seed ({a},{b})"),
                ));
            }
        }
        if scores.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::contract(
                "SeedSet::new",
                "scores must be sorted non-increasing",
            ));
        }
        Ok(SeedSet {
            indices_a,
            indices_b,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.indices_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices_a.is_empty()
    }

    /// Seed pairs as (a, b) tuples.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices_a.iter().copied().zip(self.indices_b.iter().copied())
    }
}

/// Default seed count: round(128 · n / 2000), floored at 8.
pub fn default_seed_count(n: usize) -> usize {
    ((128.0 * n as f64 / 2000.0).round() as usize).max(8)
}

/// Mutual-nearest-neighbor descriptor matching with ratio scores.
///
/// For each keypoint of A the nearest and second-nearest descriptors in B
/// (L2) give the score 1 − d₁/d₂; pairs that fail the mutual check are
/// dropped. Needs at least two keypoints per side for the ratio; smaller
/// inputs return an empty list with a warning.
pub fn nn_match(a: &KeypointSet, b: &KeypointSet) -> NnMatches {
    let (n, m) = (a.len(), b.len());
    if n < 2 || m < 2 {
        return NnMatches {
            pairs: Vec::new(),
            warning: Some(format!(
                "nn_match: need >= 2 keypoints per side for the ratio test, got {n}/{m}"
            )),
        };
    }
    // Squared distances via the dot-product identity, so the heavy lifting
    // is a single matmul: d²(i,j) = |a_i|² + |b_j|² − 2 a_i·b_j.
    let dot = a
        .descriptors
        .matmul(&b.descriptors.transpose())
        .expect("descriptor widths validated");
    let sq_norm = |m: &Matrix, i: usize| -> f64 { m.row(i).iter().map(|x| x * x).sum() };
    let a_norms: Vec<f64> = (0..n).map(|i| sq_norm(&a.descriptors, i)).collect();
    let b_norms: Vec<f64> = (0..m).map(|j| sq_norm(&b.descriptors, j)).collect();
    let dist = |i: usize, j: usize| -> f64 {
        (a_norms[i] + b_norms[j] - 2.0 * dot.at(i, j)).max(0.0).sqrt()
    };

    // Nearest neighbor of each B keypoint in A, for the mutual check.
    let mut b_nearest = vec![0usize; m];
    for j in 0..m {
        let mut best = 0;
        for i in 1..n {
            if dist(i, j) < dist(best, j) {
                best = i;
            }
        }
        b_nearest[j] = best;
    }

    let mut pairs = Vec::new();
    for i in 0..n {
        let (mut j1, mut d1) = (0usize, f64::INFINITY);
        let mut d2 = f64::INFINITY;
        for j in 0..m {
            let d = dist(i, j);
            if d < d1 {
                d2 = d1;
                d1 = d;
                j1 = j;
            } else if d < d2 {
                d2 = d;
            }
        }
        if b_nearest[j1] != i {
            continue;
        }
        let score = if d2 <= 0.0 { 0.0 } else { 1.0 - d1 / d2 };
        pairs.push(PutativeMatch { a: i, b: j1, score });
    }
    NnMatches {
        pairs,
        warning: None,
    }
}

/// NMS radius: θ times the mean pairwise distance over ordered pairs
/// (i ≠ j). Fewer than two points, or all-coincident points, give 0.
pub fn nms_radius(coords: &Matrix) -> f64 {
    let n = coords.rows();
    if n < 2 {
        return 0.0;
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
    NMS_THETA * total / (n * (n - 1)) as f64
}

/// Orders candidates by score (desc), breaking ties by image-A then
/// image-B coordinates so the order is invariant to index relabeling.
fn content_order(
    candidates: &mut [PutativeMatch],
    coords_a: &Matrix,
    coords_b: &Matrix,
) {
    candidates.sort_by(|x, y| {
        y.score
            .partial_cmp(&x.score)
            .unwrap()
            .then_with(|| {
                let ka = (coords_a.at(x.a, 0), coords_a.at(x.a, 1));
                let kb = (coords_a.at(y.a, 0), coords_a.at(y.a, 1));
                ka.partial_cmp(&kb).unwrap()
            })
            .then_with(|| {
                let ka = (coords_b.at(x.b, 0), coords_b.at(x.b, 1));
                let kb = (coords_b.at(y.b, 0), coords_b.at(y.b, 1));
                ka.partial_cmp(&kb).unwrap()
            })
    });
}

/// Greedy NMS seed selection: sweep candidates in content order, accepting
/// each unless its image-A keypoint lies strictly closer than `radius` to
/// an already-accepted seed; stop after `k` seeds.
pub fn select_seeds(
    candidates: &[PutativeMatch],
    k: usize,
    radius: f64,
    coords_a: &Matrix,
    coords_b: &Matrix,
) -> SeedSet {
    if k == 0 {
        return SeedSet::default();
    }
    let mut ordered = candidates.to_vec();
    content_order(&mut ordered, coords_a, coords_b);

    let mut accepted: Vec<PutativeMatch> = Vec::new();
    for cand in ordered {
        if accepted.len() >= k {
            break;
        }
        let (cx, cy) = (coords_a.at(cand.a, 0), coords_a.at(cand.a, 1));
        let suppressed = accepted.iter().any(|acc| {
            let dx = coords_a.at(acc.a, 0) - cx;
            let dy = coords_a.at(acc.a, 1) - cy;
            (dx * dx + dy * dy).sqrt() < radius
        });
        if !suppressed {
            accepted.push(cand);
        }
    }
    SeedSet {
        indices_a: accepted.iter().map(|p| p.a).collect(),
        indices_b: accepted.iter().map(|p| p.b).collect(),
        scores: accepted.iter().map(|p| p.score).collect(),
    }
}

/// Full initial-seeding pipeline: NN matching, NMS radius from image A's
/// keypoints, greedy selection of up to `k` seeds.
pub fn initial_seeds(a: &KeypointSet, b: &KeypointSet, k: usize) -> Result<SeedSet> {
    let nn = nn_match(a, b);
    let radius = nms_radius(a.coords());
    let seeds = select_seeds(&nn.pairs, k, radius, a.coords(), b.coords());
    if seeds.is_empty() {
        let detail = nn
            .warning
            .unwrap_or_else(|| "no mutual nearest neighbour candidates survived".into());
        return Err(Error::Unseedable(detail));
    }
    Ok(seeds)
}

/// Reseeding from an intermediate assignment matrix: real-block cells that
/// strictly dominate both their row and their column (dustbins compete but
/// cannot be selected), ranked by probability, spatially spread by NMS,
/// truncated to `k`. Returns an empty set when no cell dominates — the
/// caller falls back to the initial seeds.
pub fn reseed(
    m: &AssignmentMatrix,
    k: usize,
    coords_a: &Matrix,
    coords_b: &Matrix,
) -> SeedSet {
    let (n, mm) = m.real_shape();
    let values = m.values();
    let mut candidates = Vec::new();
    for i in 0..n {
        for j in 0..mm {
            let x = values.at(i, j);
            let row_ok = (0..mm + 1).all(|jj| jj == j || values.at(i, jj) < x);
            if !row_ok {
                continue;
            }
            let col_ok = (0..n + 1).all(|ii| ii == i || values.at(ii, j) < x);
            if col_ok {
                candidates.push(PutativeMatch {
                    a: i,
                    b: j,
                    score: x,
                });
            }
        }
    }
    select_seeds(&candidates, k, nms_radius(coords_a), coords_a, coords_b)
}
