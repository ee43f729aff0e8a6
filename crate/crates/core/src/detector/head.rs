use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{tanh_backward, tanh_in_place, Dense};
use crate::saliency::SaliencyScore;

use super::context::CONTEXT_DIM;

/// Logit column holding the keypoint class; column 0 is "not a keypoint".
pub const KEYPOINT_CLASS: usize = 1;
pub const HEAD_HIDDEN: usize = 16;

/// Two dense stages mapping `[s ‖ pca ‖ context]` to two logits.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointHead {
    pub hidden: Dense,
    pub logits: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `N × 2`.
    pub logits: DMatrix<f64>,
    /// `softmax(logits)[KEYPOINT_CLASS]` per point.
    pub probabilities: Vec<f64>,
}

pub(crate) struct HeadTrace {
    hidden: Vec<f64>,
}

/// Row-wise concatenation `[saliency ‖ pca ‖ context]`.
pub fn assemble_input(s: &SaliencyScore, pca: &DMatrix<f64>, ctx: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.normalized {
        return Err(Error::UnnormalizedSaliency);
    }
    let n = s.values.len();
    if pca.nrows() != n || ctx.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "saliency has {n} rows, PCA features {}, context {}",
            pca.nrows(),
            ctx.nrows()
        )));
    }
    if ctx.ncols() != CONTEXT_DIM {
        return Err(Error::ShapeMismatch(format!(
            "context features must be {CONTEXT_DIM} wide, got {}",
            ctx.ncols()
        )));
    }
    let m = pca.ncols();
    Ok(DMatrix::from_fn(n, 1 + m + CONTEXT_DIM, |i, c| {
        if c == 0 {
            s.values[i]
        } else if c <= m {
            pca[(i, c - 1)]
        } else {
            ctx[(i, c - 1 - m)]
        }
    }))
}

fn softmax2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

impl KeypointHead {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Dense::init(input_dim, HEAD_HIDDEN, &mut rng),
            logits: Dense::init(HEAD_HIDDEN, 2, &mut rng),
        }
    }

    pub fn zeros(input_dim: usize) -> Self {
        Self {
            hidden: Dense::zeros(input_dim, HEAD_HIDDEN),
            logits: Dense::zeros(HEAD_HIDDEN, 2),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.inputs
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> Result<HeadOutput> {
        Ok(self.forward_trace(input)?.0)
    }

    pub(crate) fn forward_trace(&self, input: &DMatrix<f64>) -> Result<(HeadOutput, HeadTrace)> {
        if input.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} input columns, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        let n = input.nrows();
        let mut hidden = vec![0.0; n * HEAD_HIDDEN];
        let mut logits = DMatrix::zeros(n, 2);
        let mut probabilities = Vec::with_capacity(n);
        let mut row = vec![0.0; self.input_dim()];
        for i in 0..n {
            for (c, v) in row.iter_mut().enumerate() {
                *v = input[(i, c)];
            }
            let h = &mut hidden[i * HEAD_HIDDEN..(i + 1) * HEAD_HIDDEN];
            self.hidden.forward(&row, h);
            tanh_in_place(h);
            let mut l = [0.0; 2];
            self.logits.forward(h, &mut l);
            logits[(i, 0)] = l[0];
            logits[(i, 1)] = l[1];
            probabilities.push(softmax2(l[0], l[1]).1);
        }
        Ok((
            HeadOutput {
                logits,
                probabilities,
            },
            HeadTrace { hidden },
        ))
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input rows.
    pub(crate) fn backward(
        &self,
        input: &DMatrix<f64>,
        trace: &HeadTrace,
        d_logits: &DMatrix<f64>,
        grad: &mut KeypointHead,
    ) -> DMatrix<f64> {
        let n = input.nrows();
        let dim = self.input_dim();
        let mut d_input = DMatrix::zeros(n, dim);
        let mut row = vec![0.0; dim];
        let mut d_row = vec![0.0; dim];
        let mut d_h = [0.0; HEAD_HIDDEN];
        for i in 0..n {
            let h = &trace.hidden[i * HEAD_HIDDEN..(i + 1) * HEAD_HIDDEN];
            let dl = [d_logits[(i, 0)], d_logits[(i, 1)]];
            self.logits.accumulate(h, &dl, &mut grad.logits);
            d_h.fill(0.0);
            self.logits.backward_input(&dl, &mut d_h);
            tanh_backward(h, &mut d_h);
            for (c, v) in row.iter_mut().enumerate() {
                *v = input[(i, c)];
            }
            self.hidden.accumulate(&row, &d_h, &mut grad.hidden);
            d_row.fill(0.0);
            self.hidden.backward_input(&d_h, &mut d_row);
            for (c, v) in d_row.iter().enumerate() {
                d_input[(i, c)] = *v;
            }
        }
        d_input
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.hidden.params().chain(self.logits.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.hidden.params_mut().chain(self.logits.params_mut())
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_dense(&format!("{prefix}.hidden"), &self.hidden);
        ck.put_dense(&format!("{prefix}.logits"), &self.logits);
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let hidden = ck.dense_any_input(&format!("{prefix}.hidden"), HEAD_HIDDEN)?;
        let logits = ck.dense(&format!("{prefix}.logits"), HEAD_HIDDEN, 2)?;
        if !(hidden.is_finite() && logits.is_finite()) {
            return Err(Error::Checkpoint("non-finite head weight".into()));
        }
        Ok(Self { hidden, logits })
    }
}

/// `(w_pos, w_neg)` with `w_pos = neg / max(pos, 1)` and `w_neg = 1`.
pub fn class_weights(pos_count: usize, neg_count: usize) -> (f64, f64) {
    (neg_count as f64 / pos_count.max(1) as f64, 1.0)
}

/// Class-balanced softmax cross entropy averaged over all rows, with its
/// gradient with respect to the logits. `labels[i]` is true for keypoints.
pub fn balanced_loss(logits: &DMatrix<f64>, labels: &[bool]) -> Result<(f64, DMatrix<f64>)> {
    let n = logits.nrows();
    if labels.len() != n || logits.ncols() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "{}×{} logits for {} labels",
            n,
            logits.ncols(),
            labels.len()
        )));
    }
    if n == 0 {
        return Ok((0.0, DMatrix::zeros(0, 2)));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let (w_pos, w_neg) = class_weights(pos, n - pos);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(n, 2);
    for (i, &is_kp) in labels.iter().enumerate() {
        let (l0, l1) = (logits[(i, 0)], logits[(i, 1)]);
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let (p0, p1) = softmax2(l0, l1);
        let (w, y) = if is_kp { (w_pos, KEYPOINT_CLASS) } else { (w_neg, 0) };
        loss -= w * (logits[(i, y)] - lse);
        grad[(i, 0)] = w * inv_n * (p0 - if y == 0 { 1.0 } else { 0.0 });
        grad[(i, 1)] = w * inv_n * (p1 - if y == 1 { 1.0 } else { 0.0 });
    }
    Ok((loss * inv_n, grad))
}
