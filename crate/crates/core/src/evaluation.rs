//! Keypoint quality metrics: descriptor matching precision, relative
//! repeatability and RANSAC registration.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{descriptor_nn, KeypointSet};
use crate::error::{Error, Result};
use crate::geom::{umeyama_fit, NeighborIndex, Point3, PointCloud, RigidTransform};

/// A registration succeeds when RTE is below this many metres...
pub const SUCCESS_RTE_M: f64 = 2.0;
/// ...and RRE below this many degrees.
pub const SUCCESS_RRE_DEG: f64 = 5.0;
pub const MAX_RANSAC_ITERATIONS: usize = 10_000;
pub const DEFAULT_CONFIDENCE: f64 = 0.99;
pub const DEFAULT_OVERLAP_RADIUS: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 0.5;
pub const DEFAULT_INLIER_THRESHOLD: f64 = 1.0;

/// `0, 0.05, …, 1.0` metres.
pub fn distance_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingScoreCurve {
    pub distances: Vec<f64>,
    pub precision: Vec<f64>,
    /// Correct matches at each distance (numerators of `precision`).
    pub correct: Vec<usize>,
    pub n_evaluated: usize,
    pub n_ignored_no_overlap: usize,
}

impl MatchingScoreCurve {
    /// True when no keypoint had overlap; precision is then all zeros.
    pub fn no_overlap(&self) -> bool {
        self.n_evaluated == 0
    }

    pub fn precision_at(&self, d: f64) -> Option<f64> {
        self.distances.iter().position(|&x| (x - d).abs() < 1e-12).map(|i| self.precision[i])
    }
}

fn check_rows(kp: &KeypointSet, desc: &DMatrix<f64>, cloud: &PointCloud) -> Result<()> {
    if kp.is_empty() {
        return Err(Error::EmptyKeypointSet);
    }
    if desc.nrows() != kp.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} descriptor rows for {} keypoints",
            desc.nrows(),
            kp.len()
        )));
    }
    if let Some(&bad) = kp.indices.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::ShapeMismatch(format!("keypoint index {bad} outside cloud of {}", cloud.len())));
    }
    Ok(())
}

/// Precision of one-directional descriptor matching from A's keypoints into
/// B's keypoints, as a function of the allowed localisation error.
///
/// A-keypoints whose ground-truth projection has no B point within
/// `overlap_radius` are ignored. `desc_a`/`desc_b` hold one row per keypoint.
#[allow(clippy::too_many_arguments)]
pub fn matching_score(
    kp_a: &KeypointSet,
    kp_b: &KeypointSet,
    desc_a: &DMatrix<f64>,
    desc_b: &DMatrix<f64>,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    truth: &RigidTransform,
    overlap_radius: f64,
    grid: &[f64],
) -> Result<MatchingScoreCurve> {
    check_rows(kp_a, desc_a, cloud_a)?;
    check_rows(kp_b, desc_b, cloud_b)?;
    let index_b = NeighborIndex::build(cloud_b);
    let mut errors = Vec::with_capacity(kp_a.len());
    let mut ignored = 0;
    for (row, &ia) in kp_a.indices.iter().enumerate() {
        let projected = truth.apply(cloud_a.point(ia));
        if !index_b.any_within(&projected, overlap_radius) {
            ignored += 1;
            continue;
        }
        let j = descriptor_nn(desc_a, row, desc_b);
        errors.push((cloud_b.point(kp_b.indices[j]) - projected).norm());
    }
    let n_evaluated = errors.len();
    let correct: Vec<usize> = grid
        .iter()
        .map(|&d| errors.iter().filter(|&&e| e <= d).count())
        .collect();
    let precision = correct
        .iter()
        .map(|&c| if n_evaluated == 0 { 0.0 } else { c as f64 / n_evaluated as f64 })
        .collect();
    Ok(MatchingScoreCurve {
        distances: grid.to_vec(),
        precision,
        correct,
        n_evaluated,
        n_ignored_no_overlap: ignored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityResult {
    pub repeatability: f64,
    pub k: usize,
    pub epsilon: f64,
    /// A-keypoints with a B-keypoint within `epsilon` after alignment.
    pub repeated: usize,
}

/// Fraction of A-keypoints whose ground-truth projection lies within
/// `epsilon` of some B-keypoint.
pub fn repeatability(
    kp_a: &KeypointSet,
    kp_b: &KeypointSet,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    truth: &RigidTransform,
    epsilon: f64,
) -> Result<RepeatabilityResult> {
    if kp_a.is_empty() || kp_b.is_empty() {
        return Err(Error::EmptyKeypointSet);
    }
    let index_b = NeighborIndex::from_points(&kp_b.positions(cloud_b));
    let repeated = kp_a
        .indices
        .iter()
        .filter(|&&i| index_b.any_within(&truth.apply(cloud_a.point(i)), epsilon))
        .count();
    Ok(RepeatabilityResult {
        repeatability: repeated as f64 / kp_a.len() as f64,
        k: kp_a.len(),
        epsilon,
        repeated,
    })
}

/// `⌈log(1 − confidence) / log(1 − w³)⌉`, saturating at `usize::MAX` when
/// the inlier fraction is zero.
pub fn required_iterations(inlier_fraction: f64, confidence: f64) -> usize {
    let w3 = inlier_fraction.clamp(0.0, 1.0).powi(3);
    if w3 <= 0.0 {
        return usize::MAX;
    }
    if w3 >= 1.0 {
        return 0;
    }
    let n = ((1.0 - confidence).ln() / (-w3).ln_1p()).ceil();
    if n.is_finite() && n < usize::MAX as f64 {
        n.max(0.0) as usize
    } else {
        usize::MAX
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            confidence: DEFAULT_CONFIDENCE,
            max_iterations: MAX_RANSAC_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub estimated: RigidTransform,
    /// Hypotheses drawn.
    pub iterations: usize,
    pub inliers: usize,
    pub putative: usize,
    pub inlier_ratio: f64,
}

/// Mutual nearest neighbours in descriptor space, as `(row_a, row_b)`.
pub fn mutual_matches(desc_a: &DMatrix<f64>, desc_b: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let b_to_a: Vec<usize> = (0..desc_b.nrows()).map(|j| descriptor_nn(desc_b, j, desc_a)).collect();
    (0..desc_a.nrows())
        .filter_map(|i| {
            let j = descriptor_nn(desc_a, i, desc_b);
            (b_to_a[j] == i).then_some((i, j))
        })
        .collect()
}

/// RANSAC over mutual descriptor matches with 3-point Umeyama hypotheses and
/// adaptive stopping; the best model is re-fitted on all of its inliers.
pub fn ransac_register(
    pos_a: &[Point3],
    desc_a: &DMatrix<f64>,
    pos_b: &[Point3],
    desc_b: &DMatrix<f64>,
    cfg: &RansacConfig,
) -> Result<RansacOutcome> {
    if pos_a.len() != desc_a.nrows() || pos_b.len() != desc_b.nrows() {
        return Err(Error::ShapeMismatch("keypoint positions and descriptors differ in length".into()));
    }
    if pos_a.len() < 3 || pos_b.len() < 3 {
        return Err(Error::TooFewMatches(pos_a.len().min(pos_b.len())));
    }
    let matches = mutual_matches(desc_a, desc_b);
    let m = matches.len();
    if m < 3 {
        return Err(Error::TooFewMatches(m));
    }
    let src: Vec<Point3> = matches.iter().map(|&(i, _)| pos_a[i]).collect();
    let dst: Vec<Point3> = matches.iter().map(|&(_, j)| pos_b[j]).collect();
    let count_inliers = |t: &RigidTransform| -> Vec<usize> {
        (0..m)
            .filter(|&i| (t.apply(&src[i]) - dst[i]).norm() <= cfg.inlier_threshold)
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_iter = cfg.max_iterations.max(1);
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    let mut needed = usize::MAX;
    let mut iterations = 0;
    while iterations < max_iter && iterations < needed {
        iterations += 1;
        let sample = rand::seq::index::sample(&mut rng, m, 3);
        let s: Vec<Point3> = sample.iter().map(|i| src[i]).collect();
        let d: Vec<Point3> = sample.iter().map(|i| dst[i]).collect();
        let Ok(model) = umeyama_fit(&s, &d) else {
            continue;
        };
        let inliers = count_inliers(&model);
        if best.as_ref().map_or(true, |(_, b)| inliers.len() > b.len()) {
            needed = required_iterations(inliers.len() as f64 / m as f64, cfg.confidence);
            best = Some((model, inliers));
        }
    }

    let (estimated, inliers) = match best {
        Some((model, inliers)) => {
            let refit = if inliers.len() >= 3 {
                let s: Vec<Point3> = inliers.iter().map(|&i| src[i]).collect();
                let d: Vec<Point3> = inliers.iter().map(|&i| dst[i]).collect();
                umeyama_fit(&s, &d).unwrap_or(model)
            } else {
                model
            };
            (refit, inliers.len())
        }
        None => (RigidTransform::identity(), 0),
    };
    Ok(RansacOutcome {
        estimated,
        iterations,
        inliers,
        putative: m,
        inlier_ratio: inliers as f64 / m as f64,
    })
}

/// Translation (m) and rotation (°) error of `estimated` against `truth`,
/// read off `Δ = truth⁻¹ ∘ estimated`.
pub fn rte_rre(estimated: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    let delta = truth.invert().compose(estimated);
    (delta.translation().norm(), delta.rotation_angle().to_degrees())
}

pub fn is_success(rte: f64, rre: f64) -> bool {
    rte < SUCCESS_RTE_M && rre < SUCCESS_RRE_DEG
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub estimated: RigidTransform,
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
    pub iterations: usize,
    pub inlier_ratio: f64,
}

impl RegistrationResult {
    pub fn new(outcome: &RansacOutcome, truth: &RigidTransform) -> Self {
        let (rte, rre) = rte_rre(&outcome.estimated, truth);
        Self {
            estimated: outcome.estimated,
            rte,
            rre,
            success: is_success(rte, rre),
            iterations: outcome.iterations,
            inlier_ratio: outcome.inlier_ratio,
        }
    }

    /// A registration that could not be attempted (too few matches).
    pub fn failed(iterations: usize) -> Self {
        Self {
            estimated: RigidTransform::identity(),
            rte: f64::NAN,
            rre: f64::NAN,
            success: false,
            iterations,
            inlier_ratio: 0.0,
        }
    }
}

/// Table-style summary; RTE and RRE statistics cover successful
/// registrations only and are `None` when there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub count: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub rte_mean: Option<f64>,
    pub rte_std: Option<f64>,
    pub rre_mean: Option<f64>,
    pub rre_std: Option<f64>,
    pub mean_iterations: f64,
    pub mean_inlier_ratio: f64,
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

pub fn aggregate_registration(results: &[RegistrationResult]) -> Result<RegistrationSummary> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = results.len() as f64;
    let ok: Vec<&RegistrationResult> = results.iter().filter(|r| r.success).collect();
    let (rte_mean, rte_std) = mean_std(&ok.iter().map(|r| r.rte).collect::<Vec<_>>());
    let (rre_mean, rre_std) = mean_std(&ok.iter().map(|r| r.rre).collect::<Vec<_>>());
    Ok(RegistrationSummary {
        count: results.len(),
        successes: ok.len(),
        success_rate: ok.len() as f64 / n,
        rte_mean,
        rte_std,
        rre_mean,
        rre_std,
        mean_iterations: results.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        mean_inlier_ratio: results.iter().map(|r| r.inlier_ratio).sum::<f64>() / n,
    })
}
