use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geom::{PointCloud, RigidTransform};

/// Two observations of one scene; `truth` maps `cloud_k` into the frame of `cloud_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub cloud_k: PointCloud,
    pub cloud_l: PointCloud,
    pub truth: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointLabel {
    pub positive: bool,
    /// Descriptor-space nearest neighbour in the other cloud.
    pub matched: Option<usize>,
}

/// Directional labels for both clouds of a pair. Matches need not be
/// injective or surjective.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceLabels {
    pub k_side: Vec<PointLabel>,
    pub l_side: Vec<PointLabel>,
}

impl CorrespondenceLabels {
    pub fn positives(&self) -> usize {
        self.k_side.iter().chain(&self.l_side).filter(|l| l.positive).count()
    }

    /// Flags for the stacked `[cloud_k; cloud_l]` points.
    pub fn stacked(&self) -> Vec<bool> {
        self.k_side.iter().chain(&self.l_side).map(|l| l.positive).collect()
    }
}

/// Row index of the nearest descriptor in `targets` (squared Euclidean,
/// lowest index on ties).
pub(crate) fn descriptor_nn(query: &DMatrix<f64>, row: usize, targets: &DMatrix<f64>) -> usize {
    let d = query.ncols();
    let mut best = (f64::INFINITY, 0usize);
    for j in 0..targets.nrows() {
        let mut acc = 0.0;
        for c in 0..d {
            let diff = query[(row, c)] - targets[(j, c)];
            acc += diff * diff;
        }
        if acc < best.0 {
            best = (acc, j);
        }
    }
    best.1
}

fn label_side(
    from: &PointCloud,
    to: &PointCloud,
    t: &RigidTransform,
    desc_from: &DMatrix<f64>,
    desc_to: &DMatrix<f64>,
    tau: f64,
) -> Vec<PointLabel> {
    from.iter()
        .enumerate()
        .map(|(i, p)| {
            let projected = t.apply(p);
            let d = descriptor_nn(desc_from, i, desc_to);
            let positive = (to.point(d) - projected).norm() <= tau;
            PointLabel {
                positive,
                matched: Some(d),
            }
        })
        .collect()
}

/// A point is positive when its descriptor-space nearest neighbour in the
/// other cloud lies within `tau` of its ground-truth projection.
pub fn label_correspondences(
    pair: &TrainingPair,
    desc_k: &DMatrix<f64>,
    desc_l: &DMatrix<f64>,
    tau: f64,
) -> Result<CorrespondenceLabels> {
    if desc_k.nrows() == 0 || desc_l.nrows() == 0 {
        return Err(Error::EmptyCloud);
    }
    if desc_k.nrows() != pair.cloud_k.len() || desc_l.nrows() != pair.cloud_l.len() || desc_k.ncols() != desc_l.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "descriptors {}×{} / {}×{} for clouds of {} / {} points",
            desc_k.nrows(),
            desc_k.ncols(),
            desc_l.nrows(),
            desc_l.ncols(),
            pair.cloud_k.len(),
            pair.cloud_l.len()
        )));
    }
    Ok(CorrespondenceLabels {
        k_side: label_side(&pair.cloud_k, &pair.cloud_l, &pair.truth, desc_k, desc_l, tau),
        l_side: label_side(&pair.cloud_l, &pair.cloud_k, &pair.truth.invert(), desc_l, desc_k, tau),
    })
}
