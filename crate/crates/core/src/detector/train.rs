use nalgebra::DMatrix;

use crate::checkpoint::Checkpoint;
use crate::descriptor::{fit_pca, project_pca, DescriptorModel, PcaProjection, DEFAULT_NEIGHBORS};
use crate::error::{Error, Result};
use crate::geom::{knn_graph, PointCloud};
use crate::saliency::{cloud_saliency, SaliencyScore};

use super::context::ContextEncoder;
use super::head::{assemble_input, balanced_loss, KeypointHead};
use super::labels::{label_correspondences, TrainingPair};
use super::{top_k, KeypointSet};

pub const DETECTOR_KIND: &str = "skd-detector";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Neighbourhood size of the context encoder.
    pub neighbors: usize,
    /// Correspondence radius for positive labels, metres.
    pub tau: f64,
    pub epochs: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub seed: u64,
    pub pca_target: f64,
    /// Descriptor layer whose saliency feeds the head.
    pub layer: usize,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            tau: 0.5,
            epochs: 150,
            step_size: 0.05,
            momentum: 0.9,
            seed: 0,
            pca_target: 0.9,
            layer: 3,
            pretrain_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean pair loss per epoch, measured before that epoch's updates.
    pub loss: Vec<f64>,
    pub pretrain_loss: Vec<f64>,
}

/// Frozen inputs of one training pair, computed once with the descriptor
/// exactly as at inference time.
#[derive(Debug, Clone)]
pub struct PairInputs {
    clouds: [PointCloud; 2],
    nbrs: [Vec<usize>; 2],
    saliency: [SaliencyScore; 2],
    pca: [DMatrix<f64>; 2],
    /// Keypoint flags for the stacked `[cloud_k; cloud_l]` points.
    pub labels: Vec<bool>,
}

impl PairInputs {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Trained saliency-driven detector with the frozen descriptor it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct SkdDetector {
    pub descriptor: DescriptorModel,
    pub layer: usize,
    pub pca: PcaProjection,
    pub encoder: ContextEncoder,
    pub head: KeypointHead,
}

struct CloudFrozen {
    descriptors: DMatrix<f64>,
    saliency: SaliencyScore,
}

fn freeze(descriptor: &DescriptorModel, cloud: &PointCloud, layer: usize) -> Result<CloudFrozen> {
    Ok(CloudFrozen {
        descriptors: descriptor.describe(cloud)?,
        saliency: cloud_saliency(descriptor, cloud, layer)?,
    })
}

fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    DMatrix::from_fn(na + nb, a.ncols(), |i, c| if i < na { a[(i, c)] } else { b[(i - na, c)] })
}

impl SkdDetector {
    /// Prepares frozen inputs, fits PCA on all training descriptors,
    /// pretrains the context encoder and trains end to end.
    pub fn fit(descriptor: &DescriptorModel, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<(Self, TrainReport)> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut frozen = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let fk = freeze(descriptor, &pair.cloud_k, cfg.layer).map_err(|e| e.in_pair(i.to_string()))?;
            let fl = freeze(descriptor, &pair.cloud_l, cfg.layer).map_err(|e| e.in_pair(i.to_string()))?;
            frozen.push((fk, fl));
        }
        let all_desc = frozen
            .iter()
            .flat_map(|(a, b)| [&a.descriptors, &b.descriptors])
            .fold(None::<DMatrix<f64>>, |acc, m| Some(match acc {
                None => m.clone(),
                Some(a) => vstack(&a, m),
            }))
            .expect("non-empty");
        let pca = fit_pca(&all_desc, cfg.pca_target)?;

        let mut inputs = Vec::with_capacity(pairs.len());
        for (i, (pair, (fk, fl))) in pairs.iter().zip(frozen).enumerate() {
            let prep = || -> Result<PairInputs> {
                let labels = label_correspondences(pair, &fk.descriptors, &fl.descriptors, cfg.tau)?;
                Ok(PairInputs {
                    nbrs: [
                        knn_graph(&pair.cloud_k, cfg.neighbors)?,
                        knn_graph(&pair.cloud_l, cfg.neighbors)?,
                    ],
                    pca: [project_pca(&pca, &fk.descriptors)?, project_pca(&pca, &fl.descriptors)?],
                    clouds: [pair.cloud_k.clone(), pair.cloud_l.clone()],
                    saliency: [fk.saliency, fl.saliency],
                    labels: labels.stacked(),
                })
            };
            inputs.push(prep().map_err(|e| e.in_pair(i.to_string()))?);
        }

        let mut encoder = ContextEncoder::new(cfg.neighbors, cfg.seed);
        let mut head = KeypointHead::new(1 + pca.output_dim() + 2, cfg.seed.wrapping_add(1));
        let clouds: Vec<PointCloud> = inputs.iter().flat_map(|p| p.clouds.iter().cloned()).collect();
        let pretrain_loss = encoder.pretrain(&clouds, cfg.pretrain_epochs, cfg.step_size, cfg.momentum)?;
        let loss = train(&mut head, &mut encoder, &inputs, cfg)?;
        Ok((
            Self {
                descriptor: descriptor.clone(),
                layer: cfg.layer,
                pca,
                encoder,
                head,
            },
            TrainReport { loss, pretrain_loss },
        ))
    }

    /// Builds the frozen training inputs of a pair for this detector.
    pub fn pair_inputs(&self, pair: &TrainingPair, tau: f64) -> Result<PairInputs> {
        let fk = freeze(&self.descriptor, &pair.cloud_k, self.layer)?;
        let fl = freeze(&self.descriptor, &pair.cloud_l, self.layer)?;
        let labels = label_correspondences(pair, &fk.descriptors, &fl.descriptors, tau)?;
        let k = self.encoder.neighbors();
        Ok(PairInputs {
            nbrs: [knn_graph(&pair.cloud_k, k)?, knn_graph(&pair.cloud_l, k)?],
            pca: [project_pca(&self.pca, &fk.descriptors)?, project_pca(&self.pca, &fl.descriptors)?],
            clouds: [pair.cloud_k.clone(), pair.cloud_l.clone()],
            saliency: [fk.saliency, fl.saliency],
            labels: labels.stacked(),
        })
    }

    /// Keypoint probability of every point.
    pub fn probabilities(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let frozen = freeze(&self.descriptor, cloud, self.layer)?;
        let pca = project_pca(&self.pca, &frozen.descriptors)?;
        let ctx = self.encoder.context_features(cloud)?;
        let input = assemble_input(&frozen.saliency, &pca, &ctx)?;
        Ok(self.head.forward(&input)?.probabilities)
    }

    /// The `k` most probable keypoints; no suppression or thresholding.
    pub fn detect_topk(&self, cloud: &PointCloud, k: usize) -> Result<KeypointSet> {
        if k == 0 || k > cloud.len() {
            return Err(Error::KTooLarge { k, n: cloud.len() });
        }
        top_k(&self.probabilities(cloud)?, k)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.descriptor.to_checkpoint_as(DETECTOR_KIND, "descriptor");
        ck.set_meta("layer", self.layer.to_string());
        self.pca.write_into(&mut ck, "pca");
        self.encoder.write_into(&mut ck, "context");
        self.head.write_into(&mut ck, "head");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(DETECTOR_KIND)?;
        let descriptor = DescriptorModel::read_from(ck, "descriptor")?;
        let layer: usize = ck.meta_parsed("layer")?;
        descriptor.layer_width(layer)?;
        let pca = PcaProjection::read_from(ck, "pca")?;
        let encoder = ContextEncoder::read_from(ck, "context")?;
        let head = KeypointHead::read_from(ck, "head")?;
        if pca.input_dim() != descriptor.layer_width(descriptor.layer_count())? {
            return Err(Error::Checkpoint("PCA input width does not match the descriptor".into()));
        }
        if head.input_dim() != 1 + pca.output_dim() + 2 {
            return Err(Error::Checkpoint("head input width does not match PCA output".into()));
        }
        Ok(Self {
            descriptor,
            layer,
            pca,
            encoder,
            head,
        })
    }
}

/// Loss of one pair (both clouds stacked) and its gradients with respect to
/// the head and encoder parameters.
pub fn loss_and_gradients(
    head: &KeypointHead,
    encoder: &ContextEncoder,
    inputs: &PairInputs,
) -> Result<(f64, KeypointHead, ContextEncoder)> {
    let mut traces = Vec::with_capacity(2);
    let mut assembled = Vec::with_capacity(2);
    for side in 0..2 {
        let tr = encoder.trace_with(&inputs.clouds[side], inputs.nbrs[side].clone())?;
        assembled.push(assemble_input(&inputs.saliency[side], &inputs.pca[side], &tr.features)?);
        traces.push(tr);
    }
    let stacked = vstack(&assembled[0], &assembled[1]);
    let (out, head_trace) = head.forward_trace(&stacked)?;
    let (loss, d_logits) = balanced_loss(&out.logits, &inputs.labels)?;

    let mut head_grad = KeypointHead::zeros(head.input_dim());
    let d_input = head.backward(&stacked, &head_trace, &d_logits, &mut head_grad);
    let mut enc_grad = ContextEncoder::zeros(encoder.neighbors());
    let ctx_col = d_input.ncols() - 2;
    let n0 = inputs.clouds[0].len();
    for side in 0..2 {
        let n = inputs.clouds[side].len();
        let off = if side == 0 { 0 } else { n0 };
        let d_ctx = d_input.view((off, ctx_col), (n, 2)).into_owned();
        encoder.backward(&inputs.clouds[side], &traces[side], &d_ctx, &mut enc_grad);
    }
    Ok((loss, head_grad, enc_grad))
}

/// End-to-end momentum gradient descent, one full-batch step per pair per
/// epoch, pairs visited in order. Returns the mean pair loss per epoch.
pub fn train(
    head: &mut KeypointHead,
    encoder: &mut ContextEncoder,
    pairs: &[PairInputs],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v_head = KeypointHead::zeros(head.input_dim());
    let mut v_enc = ContextEncoder::zeros(encoder.neighbors());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for inputs in pairs {
            let (loss, g_head, g_enc) = loss_and_gradients(head, encoder, inputs)?;
            total += loss;
            for ((p, v), g) in head.params_mut().zip(v_head.params_mut()).zip(g_head.params()) {
                *v = cfg.momentum * *v - cfg.step_size * g;
                *p += *v;
            }
            for ((p, v), g) in encoder.params_mut().zip(v_enc.params_mut()).zip(g_enc.params()) {
                *v = cfg.momentum * *v - cfg.step_size * g;
                *p += *v;
            }
        }
        trace.push(total / pairs.len() as f64);
    }
    Ok(trace)
}
