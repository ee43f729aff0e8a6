//! Per-point saliency from descriptor activations and input gradients.
//!
//! The initial saliency of point `i` is its gradient row scaled by the sum of
//! its activation vector, `S_i = (Σ_d a_id) · g_i`. The score then weights the
//! projection of `S_i` on the offset from the cloud's median by the radial
//! distance: `s_i = −(Σ_j S_ij (x_ij − m_j)) · r_i`.

use nalgebra::DMatrix;

use crate::descriptor::{DescriptorModel, InputGradient, LayerActivations};
use crate::error::{Error, Result};
use crate::geom::{median_center, radial_distances, PointCloud};

/// Per-point saliency vectors, `N × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyField {
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyScore {
    pub values: Vec<f64>,
    pub normalized: bool,
}

/// Below this population standard deviation scores are treated as constant.
pub const DEGENERATE_STD: f64 = 1e-12;

pub fn initial_saliency(acts: &LayerActivations, grads: &InputGradient) -> Result<SaliencyField> {
    let n = acts.values.nrows();
    if grads.values.nrows() != n || grads.values.ncols() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "activations have {n} rows, gradient is {}×{}",
            grads.values.nrows(),
            grads.values.ncols()
        )));
    }
    let weights: Vec<f64> = acts.values.row_iter().map(|r| r.sum()).collect();
    Ok(SaliencyField {
        values: DMatrix::from_fn(n, 3, |i, j| weights[i] * grads.values[(i, j)]),
    })
}

/// Raw (unnormalized) score.
pub fn saliency_score(field: &SaliencyField, cloud: &PointCloud) -> Result<SaliencyScore> {
    if field.values.nrows() != cloud.len() || field.values.ncols() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "field is {}×{}, cloud has {} points",
            field.values.nrows(),
            field.values.ncols(),
            cloud.len()
        )));
    }
    let m = median_center(cloud);
    let r = radial_distances(cloud, &m);
    let values = cloud
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += field.values[(i, j)] * (p[j] - m[j]);
            }
            -acc * r[i]
        })
        .collect();
    Ok(SaliencyScore {
        values,
        normalized: false,
    })
}

/// Zero mean, unit population variance. A constant input maps to all zeros.
pub fn normalize_scores(s: &SaliencyScore) -> SaliencyScore {
    let n = s.values.len().max(1) as f64;
    let mean = s.values.iter().sum::<f64>() / n;
    let var = s.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let values = if std < DEGENERATE_STD {
        vec![0.0; s.values.len()]
    } else {
        s.values.iter().map(|v| (v - mean) / std).collect()
    };
    SaliencyScore {
        values,
        normalized: true,
    }
}

/// Full chain for one descriptor layer: activations and gradient, field,
/// raw score, normalization.
pub fn cloud_saliency(model: &DescriptorModel, cloud: &PointCloud, layer: usize) -> Result<SaliencyScore> {
    let (acts, grads) = model.activations_and_gradient(cloud, layer)?;
    let field = initial_saliency(&acts, &grads)?;
    Ok(normalize_scores(&saliency_score(&field, cloud)?))
}
