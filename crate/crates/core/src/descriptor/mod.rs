//! Reference per-point descriptor with layer access and exact input gradients.
//!
//! The stage chain is
//!
//! 1. per-point path: `tanh(A₁·(p_i − mean_{j∈N(i)} p_j) + b₁)`, 3 → 16
//! 2. local aggregation: `max_{j∈N(i)} tanh(A_e·(p_j − p_i) + b_e)`, 3 → 16,
//!    concatenated with stage 1 → 32
//! 3. `tanh(A₃·x + b₃)`, 32 → 16
//! 4. `A₄·x + b₄`, 16 → 8 (the descriptor)
//!
//! `N(i)` is the k-nearest-neighbour set of point `i` (itself included). Every
//! stage only sees coordinate differences, so the descriptor is invariant to
//! translations of the whole cloud.

mod pca;

pub use pca::{fit_pca, project_pca, PcaProjection};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geom::{knn_graph, PointCloud};
use crate::nn::{edge_pool_backward, edge_pool_forward, tanh_backward, tanh_in_place, Dense, PoolTrace};

pub const POINT_WIDTH: usize = 16;
pub const EDGE_WIDTH: usize = 16;
pub const MIX_WIDTH: usize = 16;
pub const DESCRIPTOR_DIM: usize = 8;
pub const LAYER_COUNT: usize = 4;
pub const DEFAULT_NEIGHBORS: usize = 8;

const LAYER_WIDTHS: [usize; LAYER_COUNT] = [
    POINT_WIDTH,
    POINT_WIDTH + EDGE_WIDTH,
    MIX_WIDTH,
    DESCRIPTOR_DIM,
];

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorModel {
    k: usize,
    point: Dense,
    edge: Dense,
    mix: Dense,
    head: Dense,
}

/// Output of one stage, one row per input point.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub layer: usize,
    pub values: DMatrix<f64>,
}

/// Gradient of the summed activations of one layer with respect to every
/// input coordinate (`N × 3`).
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub layer: usize,
    pub values: DMatrix<f64>,
}

struct Trace {
    nbrs: Vec<usize>,
    h1: Vec<f64>,
    pool: Option<PoolTrace>,
    h3: Vec<f64>,
    out: Vec<f64>,
}

impl DescriptorModel {
    /// Seeded Glorot initialisation.
    pub fn new(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            k,
            point: Dense::init(3, POINT_WIDTH, &mut rng),
            edge: Dense::init(3, EDGE_WIDTH, &mut rng),
            mix: Dense::init(POINT_WIDTH + EDGE_WIDTH, MIX_WIDTH, &mut rng),
            head: Dense::init(MIX_WIDTH, DESCRIPTOR_DIM, &mut rng),
        }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            point: Dense::zeros(3, POINT_WIDTH),
            edge: Dense::zeros(3, EDGE_WIDTH),
            mix: Dense::zeros(POINT_WIDTH + EDGE_WIDTH, MIX_WIDTH),
            head: Dense::zeros(MIX_WIDTH, DESCRIPTOR_DIM),
        }
    }

    pub fn neighbors(&self) -> usize {
        self.k
    }

    pub fn layer_count(&self) -> usize {
        LAYER_COUNT
    }

    pub fn layer_width(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(LAYER_WIDTHS[layer - 1])
    }

    /// Stages in chain order: per-point, edge, mix, output.
    pub fn stages(&self) -> [&Dense; 4] {
        [&self.point, &self.edge, &self.mix, &self.head]
    }

    pub fn stages_mut(&mut self) -> [&mut Dense; 4] {
        [&mut self.point, &mut self.edge, &mut self.mix, &mut self.head]
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > LAYER_COUNT {
            return Err(Error::BadLayerIndex {
                layer,
                layers: LAYER_COUNT,
            });
        }
        Ok(())
    }

    fn forward(&self, cloud: &PointCloud, upto: usize) -> Result<Trace> {
        let n = cloud.len();
        let k = self.k;
        let nbrs = knn_graph(cloud, k)?;
        let pts = cloud.points();

        let mut h1 = vec![0.0; n * POINT_WIDTH];
        let inv_k = 1.0 / k as f64;
        for i in 0..n {
            let mut mean = [0.0; 3];
            for &j in &nbrs[i * k..(i + 1) * k] {
                for a in 0..3 {
                    mean[a] += pts[j][a];
                }
            }
            let local = [
                pts[i].x - mean[0] * inv_k,
                pts[i].y - mean[1] * inv_k,
                pts[i].z - mean[2] * inv_k,
            ];
            let row = &mut h1[i * POINT_WIDTH..(i + 1) * POINT_WIDTH];
            self.point.forward(&local, row);
            tanh_in_place(row);
        }

        let pool = (upto >= 2).then(|| edge_pool_forward(&self.edge, pts, &nbrs, k));

        let mut h3 = Vec::new();
        let mut out = Vec::new();
        if let (true, Some(pool)) = (upto >= 3, &pool) {
            h3 = vec![0.0; n * MIX_WIDTH];
            let mut cat = [0.0; POINT_WIDTH + EDGE_WIDTH];
            for i in 0..n {
                cat[..POINT_WIDTH].copy_from_slice(&h1[i * POINT_WIDTH..(i + 1) * POINT_WIDTH]);
                cat[POINT_WIDTH..].copy_from_slice(&pool.pooled[i * EDGE_WIDTH..(i + 1) * EDGE_WIDTH]);
                let row = &mut h3[i * MIX_WIDTH..(i + 1) * MIX_WIDTH];
                self.mix.forward(&cat, row);
                tanh_in_place(row);
            }
        }
        if upto >= 4 {
            out = vec![0.0; n * DESCRIPTOR_DIM];
            for i in 0..n {
                self.head.forward(
                    &h3[i * MIX_WIDTH..(i + 1) * MIX_WIDTH],
                    &mut out[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM],
                );
            }
        }
        Ok(Trace {
            nbrs,
            h1,
            pool,
            h3,
            out,
        })
    }

    /// Final-layer descriptor, `N × 8`.
    pub fn describe(&self, cloud: &PointCloud) -> Result<DMatrix<f64>> {
        Ok(self.layer_activations(cloud, LAYER_COUNT)?.values)
    }

    pub fn layer_activations(&self, cloud: &PointCloud, layer: usize) -> Result<LayerActivations> {
        self.check_layer(layer)?;
        let trace = self.forward(cloud, layer)?;
        Ok(LayerActivations {
            layer,
            values: layer_matrix(&trace, cloud.len(), layer),
        })
    }

    /// Activations and input gradient of the same layer from a single forward pass.
    pub fn activations_and_gradient(
        &self,
        cloud: &PointCloud,
        layer: usize,
    ) -> Result<(LayerActivations, InputGradient)> {
        self.check_layer(layer)?;
        let n = cloud.len();
        let trace = self.forward(cloud, layer)?;
        let grad = self.backward(cloud, &trace, layer);
        Ok((
            LayerActivations {
                layer,
                values: layer_matrix(&trace, n, layer),
            },
            InputGradient {
                layer,
                values: DMatrix::from_fn(n, 3, |i, a| grad[i][a]),
            },
        ))
    }

    /// Gradient of `Σ` (all entries of layer `layer`) with respect to the input coordinates.
    pub fn input_gradient(&self, cloud: &PointCloud, layer: usize) -> Result<InputGradient> {
        Ok(self.activations_and_gradient(cloud, layer)?.1)
    }

    fn backward(&self, cloud: &PointCloud, trace: &Trace, layer: usize) -> Vec<[f64; 3]> {
        let n = cloud.len();
        let k = self.k;
        let pts = cloud.points();
        let mut grad = vec![[0.0; 3]; n];

        let mut d_h1 = vec![0.0; n * POINT_WIDTH];
        let mut d_pool = vec![0.0; n * EDGE_WIDTH];
        match layer {
            1 => d_h1.fill(1.0),
            2 => {
                d_h1.fill(1.0);
                d_pool.fill(1.0);
            }
            _ => {
                let mut d_h3 = vec![0.0; MIX_WIDTH];
                let mut d_cat = [0.0; POINT_WIDTH + EDGE_WIDTH];
                let ones = [1.0; DESCRIPTOR_DIM];
                for i in 0..n {
                    if layer == 4 {
                        d_h3.fill(0.0);
                        self.head.backward_input(&ones, &mut d_h3);
                    } else {
                        d_h3.fill(1.0);
                    }
                    tanh_backward(&trace.h3[i * MIX_WIDTH..(i + 1) * MIX_WIDTH], &mut d_h3);
                    d_cat.fill(0.0);
                    self.mix.backward_input(&d_h3, &mut d_cat);
                    d_h1[i * POINT_WIDTH..(i + 1) * POINT_WIDTH].copy_from_slice(&d_cat[..POINT_WIDTH]);
                    d_pool[i * EDGE_WIDTH..(i + 1) * EDGE_WIDTH].copy_from_slice(&d_cat[POINT_WIDTH..]);
                }
            }
        }

        if let Some(pool) = &trace.pool {
            edge_pool_backward(&self.edge, pts, &trace.nbrs, pool, &d_pool, Some(&mut grad), None);
        }

        let inv_k = 1.0 / k as f64;
        for i in 0..n {
            let d = &mut d_h1[i * POINT_WIDTH..(i + 1) * POINT_WIDTH];
            tanh_backward(&trace.h1[i * POINT_WIDTH..(i + 1) * POINT_WIDTH], d);
            let mut d_local = [0.0; 3];
            self.point.backward_input(d, &mut d_local);
            for a in 0..3 {
                grad[i][a] += d_local[a];
            }
            for &j in &trace.nbrs[i * k..(i + 1) * k] {
                for a in 0..3 {
                    grad[j][a] -= d_local[a] * inv_k;
                }
            }
        }
        grad
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.to_checkpoint_as("descriptor", "descriptor")
    }

    /// Checkpoint of kind `kind` holding this model's tensors under `prefix`.
    pub fn to_checkpoint_as(&self, kind: &str, prefix: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(kind);
        self.write_into(&mut ck, prefix);
        ck
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set_meta(&format!("{prefix}.k"), self.k.to_string());
        ck.put_dense(&format!("{prefix}.point"), &self.point);
        ck.put_dense(&format!("{prefix}.edge"), &self.edge);
        ck.put_dense(&format!("{prefix}.mix"), &self.mix);
        ck.put_dense(&format!("{prefix}.head"), &self.head);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("descriptor")?;
        Self::read_from(ck, "descriptor")
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let k: usize = ck.meta_parsed(&format!("{prefix}.k"))?;
        if k == 0 {
            return Err(Error::Checkpoint("neighbourhood size must be >= 1".into()));
        }
        let model = Self {
            k,
            point: ck.dense(&format!("{prefix}.point"), 3, POINT_WIDTH)?,
            edge: ck.dense(&format!("{prefix}.edge"), 3, EDGE_WIDTH)?,
            mix: ck.dense(&format!("{prefix}.mix"), POINT_WIDTH + EDGE_WIDTH, MIX_WIDTH)?,
            head: ck.dense(&format!("{prefix}.head"), MIX_WIDTH, DESCRIPTOR_DIM)?,
        };
        if !model.stages().iter().all(|s| s.is_finite()) {
            return Err(Error::Checkpoint("non-finite descriptor weight".into()));
        }
        Ok(model)
    }
}

fn layer_matrix(trace: &Trace, n: usize, layer: usize) -> DMatrix<f64> {
    match layer {
        1 => DMatrix::from_row_slice(n, POINT_WIDTH, &trace.h1),
        2 => DMatrix::from_fn(n, POINT_WIDTH + EDGE_WIDTH, |i, c| {
            if c < POINT_WIDTH {
                trace.h1[i * POINT_WIDTH + c]
            } else {
                trace.pool.as_ref().map_or(0.0, |p| p.pooled[i * EDGE_WIDTH + c - POINT_WIDTH])
            }
        }),
        3 => DMatrix::from_row_slice(n, MIX_WIDTH, &trace.h3),
        _ => DMatrix::from_row_slice(n, DESCRIPTOR_DIM, &trace.out),
    }
}
