//! Minimal dense layers with hand-written reverse mode, shared by the
//! descriptor, the context encoder and the keypoint head.

use rand::Rng;

use crate::geom::Point3;

/// Affine map `y = W·x + b` with `W` stored row-major (`outputs × inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, small uniform biases.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| rng.gen_range(-limit..limit))
                .collect(),
            bias: (0..outputs).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        debug_assert_eq!(y.len(), self.outputs);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            *yo = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// `dx += Wᵀ·dy`.
    pub fn backward_input(&self, dy: &[f64], dx: &mut [f64]) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += w * g;
            }
        }
    }

    /// Accumulates `dW += dy·xᵀ`, `db += dy` into `grad`.
    pub fn accumulate(&self, x: &[f64], dy: &[f64], grad: &mut Dense) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for (w, v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }
}

pub(crate) fn tanh_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

/// Multiplies `dy` by `tanh'` given the tanh outputs `y`.
pub(crate) fn tanh_backward(y: &[f64], dy: &mut [f64]) {
    for (d, &t) in dy.iter_mut().zip(y) {
        *d *= 1.0 - t * t;
    }
}

/// Activations of a shared per-edge layer followed by a channel-wise max
/// over each point's neighbourhood.
#[derive(Debug, Clone)]
pub(crate) struct PoolTrace {
    k: usize,
    width: usize,
    /// `n × k × width` post-tanh edge activations.
    edges: Vec<f64>,
    /// `n × width` pooled maxima.
    pub pooled: Vec<f64>,
}

/// Edge features `tanh(layer(p_j − p_i))` for each neighbour slot, max-pooled.
/// `nbrs` is the flattened `n × k` neighbour table.
pub(crate) fn edge_pool_forward(layer: &Dense, points: &[Point3], nbrs: &[usize], k: usize) -> PoolTrace {
    let n = points.len();
    let width = layer.outputs;
    let mut edges = vec![0.0; n * k * width];
    let mut pooled = vec![f64::NEG_INFINITY; n * width];
    for i in 0..n {
        let pi = points[i];
        for s in 0..k {
            let pj = points[nbrs[i * k + s]];
            let off = [pj.x - pi.x, pj.y - pi.y, pj.z - pi.z];
            let e = &mut edges[(i * k + s) * width..(i * k + s + 1) * width];
            layer.forward(&off, e);
            tanh_in_place(e);
            for (m, &v) in pooled[i * width..(i + 1) * width].iter_mut().zip(e.iter()) {
                if v > *m {
                    *m = v;
                }
            }
        }
    }
    PoolTrace {
        k,
        width,
        edges,
        pooled,
    }
}

/// Reverse pass of [`edge_pool_forward`]. Gradient of a tied maximum is split
/// evenly between every slot attaining it.
pub(crate) fn edge_pool_backward(
    layer: &Dense,
    points: &[Point3],
    nbrs: &[usize],
    trace: &PoolTrace,
    d_pooled: &[f64],
    mut d_points: Option<&mut [[f64; 3]]>,
    mut d_layer: Option<&mut Dense>,
) {
    let (k, width) = (trace.k, trace.width);
    let mut d_edge = vec![0.0; width];
    for i in 0..points.len() {
        let pooled = &trace.pooled[i * width..(i + 1) * width];
        let dp = &d_pooled[i * width..(i + 1) * width];
        let mut ties = vec![0usize; width];
        for s in 0..k {
            let e = &trace.edges[(i * k + s) * width..(i * k + s + 1) * width];
            for c in 0..width {
                if e[c] == pooled[c] {
                    ties[c] += 1;
                }
            }
        }
        for s in 0..k {
            let e = &trace.edges[(i * k + s) * width..(i * k + s + 1) * width];
            let mut any = false;
            for c in 0..width {
                d_edge[c] = if e[c] == pooled[c] && dp[c] != 0.0 {
                    any = true;
                    dp[c] / ties[c] as f64
                } else {
                    0.0
                };
            }
            if !any {
                continue;
            }
            tanh_backward(e, &mut d_edge);
            let j = nbrs[i * k + s];
            let (pi, pj) = (points[i], points[j]);
            if let Some(g) = d_layer.as_deref_mut() {
                let off = [pj.x - pi.x, pj.y - pi.y, pj.z - pi.z];
                layer.accumulate(&off, &d_edge, g);
            }
            if let Some(dx) = d_points.as_deref_mut() {
                let mut d_off = [0.0; 3];
                layer.backward_input(&d_edge, &mut d_off);
                for a in 0..3 {
                    dx[j][a] += d_off[a];
                    dx[i][a] -= d_off[a];
                }
            }
        }
    }
}
