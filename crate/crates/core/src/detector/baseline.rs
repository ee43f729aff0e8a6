use crate::descriptor::InputGradient;
use crate::error::{Error, Result};
use crate::geom::{NeighborIndex, PointCloud};

use super::KeypointSet;

/// Maximum-entropy (Kapur) threshold.
///
/// Returns the first foreground bin `t`: bins `[0, t)` form the background
/// and `[t, n)` the foreground. The split maximising the sum of both class
/// entropies wins, the lowest `t` on ties. When no split leaves mass on both
/// sides (all mass in one bin) that bin's index is returned.
pub fn kapur_threshold(histogram: &[u64]) -> Result<usize> {
    let total: u64 = histogram.iter().sum();
    if histogram.is_empty() || total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let entropy = |part: &[u64], mass: u64| -> f64 {
        let mass = mass as f64;
        part.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / mass;
                -p * p.ln()
            })
            .sum()
    };
    let mut best: Option<(usize, f64)> = None;
    let mut background = 0u64;
    for t in 1..histogram.len() {
        background += histogram[t - 1];
        let foreground = total - background;
        if background == 0 || foreground == 0 {
            continue;
        }
        let h = entropy(&histogram[..t], background) + entropy(&histogram[t..], foreground);
        if best.map_or(true, |(_, b)| h > b) {
            best = Some((t, h));
        }
    }
    Ok(match best {
        Some((t, _)) => t,
        None => histogram.iter().position(|&c| c > 0).unwrap_or(0),
    })
}

/// Equal-width histogram of `scores` over `[min, max]`; also returns the bin
/// of every score.
pub fn gradient_histogram(scores: &[f64], bins: usize) -> (Vec<u64>, Vec<usize>) {
    let bins = bins.max(1);
    let mut counts = vec![0u64; bins];
    if scores.is_empty() {
        return (counts, Vec::new());
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    let bin_of: Vec<usize> = scores
        .iter()
        .map(|&s| {
            if width > 0.0 {
                (((s - lo) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect();
    for &b in &bin_of {
        counts[b] += 1;
    }
    (counts, bin_of)
}

/// Gradient-magnitude detector: Kapur threshold on `‖g_i‖`, then greedy 3D
/// non-maximum suppression. All-zero gradients select nothing.
pub fn elf3d_detect(grads: &InputGradient, cloud: &PointCloud, nms_radius: f64, bins: usize) -> Result<KeypointSet> {
    let n = cloud.len();
    if grads.values.nrows() != n || grads.values.ncols() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "gradient is {}×{}, cloud has {n} points",
            grads.values.nrows(),
            grads.values.ncols()
        )));
    }
    let scores: Vec<f64> = grads.values.row_iter().map(|r| r.norm()).collect();
    if scores.iter().all(|&s| s == 0.0) {
        return Ok(KeypointSet::empty());
    }
    let (hist, bin_of) = gradient_histogram(&scores, bins);
    let threshold_bin = kapur_threshold(&hist)?;

    let mut candidates: Vec<usize> = (0..n).filter(|&i| bin_of[i] >= threshold_bin).collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let index = NeighborIndex::build(cloud);
    let mut suppressed = vec![false; n];
    let mut out = KeypointSet::empty();
    for i in candidates {
        if suppressed[i] {
            continue;
        }
        out.indices.push(i);
        out.scores.push(scores[i]);
        for nb in index.within_radius(cloud.point(i), nms_radius) {
            suppressed[nb.index] = true;
        }
    }
    Ok(out)
}
