use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geom::{knn_graph, Matrix3, PointCloud, Vector3};
use crate::nn::{edge_pool_backward, edge_pool_forward, Dense, PoolTrace};

pub const CONTEXT_DIM: usize = 2;
pub const CONTEXT_HIDDEN: usize = 16;

/// Two-dimensional per-point context code: a shared edge layer over the
/// centred k-NN neighbourhood, max-pooled, then a linear map to 2 values.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoder {
    k: usize,
    pub edge: Dense,
    pub out: Dense,
}

/// Cached forward pass, needed to backpropagate into the encoder weights.
pub(crate) struct ContextTrace {
    pub nbrs: Vec<usize>,
    pub pool: PoolTrace,
    pub features: DMatrix<f64>,
}

impl ContextEncoder {
    pub fn new(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            k,
            edge: Dense::init(3, CONTEXT_HIDDEN, &mut rng),
            out: Dense::init(CONTEXT_HIDDEN, CONTEXT_DIM, &mut rng),
        }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            edge: Dense::zeros(3, CONTEXT_HIDDEN),
            out: Dense::zeros(CONTEXT_HIDDEN, CONTEXT_DIM),
        }
    }

    pub fn neighbors(&self) -> usize {
        self.k
    }

    /// `N × 2` context features.
    pub fn context_features(&self, cloud: &PointCloud) -> Result<DMatrix<f64>> {
        Ok(self.trace(cloud)?.features)
    }

    pub(crate) fn trace(&self, cloud: &PointCloud) -> Result<ContextTrace> {
        let nbrs = knn_graph(cloud, self.k)?;
        self.trace_with(cloud, nbrs)
    }

    pub(crate) fn trace_with(&self, cloud: &PointCloud, nbrs: Vec<usize>) -> Result<ContextTrace> {
        let n = cloud.len();
        let pool = edge_pool_forward(&self.edge, cloud.points(), &nbrs, self.k);
        let mut out = vec![0.0; n * CONTEXT_DIM];
        for i in 0..n {
            self.out.forward(
                &pool.pooled[i * CONTEXT_HIDDEN..(i + 1) * CONTEXT_HIDDEN],
                &mut out[i * CONTEXT_DIM..(i + 1) * CONTEXT_DIM],
            );
        }
        Ok(ContextTrace {
            nbrs,
            pool,
            features: DMatrix::from_row_slice(n, CONTEXT_DIM, &out),
        })
    }

    /// Accumulates parameter gradients for an upstream gradient `d_features` (`N × 2`).
    pub(crate) fn backward(
        &self,
        cloud: &PointCloud,
        trace: &ContextTrace,
        d_features: &DMatrix<f64>,
        grad: &mut ContextEncoder,
    ) {
        let n = cloud.len();
        let mut d_pooled = vec![0.0; n * CONTEXT_HIDDEN];
        let mut dy = [0.0; CONTEXT_DIM];
        for i in 0..n {
            for (c, slot) in dy.iter_mut().enumerate() {
                *slot = d_features[(i, c)];
            }
            let pooled = &trace.pool.pooled[i * CONTEXT_HIDDEN..(i + 1) * CONTEXT_HIDDEN];
            self.out.accumulate(pooled, &dy, &mut grad.out);
            self.out
                .backward_input(&dy, &mut d_pooled[i * CONTEXT_HIDDEN..(i + 1) * CONTEXT_HIDDEN]);
        }
        edge_pool_backward(
            &self.edge,
            cloud.points(),
            &trace.nbrs,
            &trace.pool,
            &d_pooled,
            None,
            Some(&mut grad.edge),
        );
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.edge.params().chain(self.out.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.edge.params_mut().chain(self.out.params_mut())
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set_meta(&format!("{prefix}.k"), self.k.to_string());
        ck.put_dense(&format!("{prefix}.edge"), &self.edge);
        ck.put_dense(&format!("{prefix}.out"), &self.out);
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let k: usize = ck.meta_parsed(&format!("{prefix}.k"))?;
        if k == 0 {
            return Err(Error::Checkpoint("context neighbourhood must be >= 1".into()));
        }
        let enc = Self {
            k,
            edge: ck.dense(&format!("{prefix}.edge"), 3, CONTEXT_HIDDEN)?,
            out: ck.dense(&format!("{prefix}.out"), CONTEXT_HIDDEN, CONTEXT_DIM)?,
        };
        if !(enc.edge.is_finite() && enc.out.is_finite()) {
            return Err(Error::Checkpoint("non-finite context weight".into()));
        }
        Ok(enc)
    }

    /// Brief regression of the context code onto local shape statistics
    /// (surface variation and linearity of each neighbourhood's covariance).
    /// Returns the mean squared error per epoch.
    pub fn pretrain(&mut self, clouds: &[PointCloud], epochs: usize, step: f64, momentum: f64) -> Result<Vec<f64>> {
        let mut data = Vec::with_capacity(clouds.len());
        for c in clouds {
            let nbrs = knn_graph(c, self.k)?;
            let target = shape_statistics(c, &nbrs, self.k);
            data.push((c, nbrs, target));
        }
        let mut velocity = ContextEncoder::zeros(self.k);
        let mut trace_out = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut epoch_loss = 0.0;
            for (cloud, nbrs, target) in &data {
                let tr = self.trace_with(cloud, nbrs.clone())?;
                let diff = &tr.features - target;
                let count = diff.len() as f64;
                epoch_loss += diff.norm_squared() / count;
                let d = diff * (2.0 / count);
                let mut grad = ContextEncoder::zeros(self.k);
                self.backward(cloud, &tr, &d, &mut grad);
                for ((p, v), g) in self.params_mut().zip(velocity.params_mut()).zip(grad.params()) {
                    *v = momentum * *v - step * g;
                    *p += *v;
                }
            }
            trace_out.push(epoch_loss / data.len().max(1) as f64);
        }
        Ok(trace_out)
    }
}

/// Per-point `(λ₃/Σλ, (λ₁−λ₂)/λ₁)` of the neighbourhood covariance.
fn shape_statistics(cloud: &PointCloud, nbrs: &[usize], k: usize) -> DMatrix<f64> {
    let pts = cloud.points();
    DMatrix::from_fn(cloud.len(), CONTEXT_DIM, |i, c| {
        let ids = &nbrs[i * k..(i + 1) * k];
        let mean = ids.iter().fold(Vector3::zeros(), |a, &j| a + pts[j].coords) / k as f64;
        let mut cov = Matrix3::zeros();
        for &j in ids {
            let d = pts[j].coords - mean;
            cov += d * d.transpose();
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = ev.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        if c == 0 {
            ev[2] / total
        } else {
            (ev[0] - ev[1]) / ev[0]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_xyz(
            &(0..n)
                .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-0.5..0.5)])
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn output_is_two_dimensional() {
        let enc = ContextEncoder::new(8, 1);
        let f = enc.context_features(&cloud(1, 30)).unwrap();
        assert_eq!(f.shape(), (30, 2));
        assert!(matches!(
            enc.context_features(&cloud(1, 4)),
            Err(Error::CloudTooSmall { .. })
        ));
    }

    #[test]
    fn pretraining_reduces_error() {
        let mut enc = ContextEncoder::new(8, 3);
        let clouds = vec![cloud(2, 60), cloud(3, 60)];
        let trace = enc.pretrain(&clouds, 60, 0.05, 0.9).unwrap();
        assert!(trace.last().unwrap() < &trace[0], "{trace:?}");
    }
}
