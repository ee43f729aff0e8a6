//! Keypoint detectors: the learned saliency-driven head, its training, and
//! the baselines it is compared against.

mod baseline;
mod context;
mod head;
mod labels;
mod train;

pub use baseline::{elf3d_detect, gradient_histogram, kapur_threshold};
pub use context::ContextEncoder;
pub use head::{assemble_input, balanced_loss, class_weights, HeadOutput, KeypointHead, KEYPOINT_CLASS};
pub(crate) use labels::descriptor_nn;
pub use labels::{label_correspondences, CorrespondenceLabels, PointLabel, TrainingPair};
pub use train::{loss_and_gradients, train, PairInputs, SkdDetector, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Selected point indices with their scores, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            scores: Vec::new(),
        }
    }

    /// Gathers rows of a per-point matrix at the keypoint indices.
    pub fn gather_rows(&self, m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
        m.select_rows(self.indices.iter())
    }

    pub fn positions(&self, cloud: &crate::geom::PointCloud) -> Vec<crate::geom::Point3> {
        self.indices.iter().map(|&i| *cloud.point(i)).collect()
    }
}

/// The `k` highest scores, ties resolved towards the lower index. No spatial
/// suppression and no threshold.
pub fn top_k(scores: &[f64], k: usize) -> Result<KeypointSet> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(KeypointSet {
        scores: order.iter().map(|&i| scores[i]).collect(),
        indices: order,
    })
}

/// `k` distinct indices drawn uniformly without replacement, reproducible per seed.
pub fn random_detect(n: usize, k: usize, seed: u64) -> Result<KeypointSet> {
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
    Ok(KeypointSet {
        scores: vec![1.0; k],
        indices,
    })
}
