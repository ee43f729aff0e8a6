//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skd_core::descriptor::DescriptorModel;
use skd_core::detector::{loss_and_gradients, PairInputs, SkdDetector, TrainConfig, TrainingPair};
use skd_core::geom::{Point3, PointCloud, RigidTransform, Vector3};
use skd_core::nn::Dense;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_xyz(rng: &mut ChaCha8Rng, n: usize, half_extent: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
            ]
        })
        .collect()
}

pub fn cloud(xyz: &[[f64; 3]]) -> PointCloud {
    PointCloud::from_xyz(xyz).unwrap()
}

/// Cloud on a 2⁻¹⁰ m grid; sums and differences of such coordinates (and of
/// dyadic translations) are exact in `f64`.
pub fn dyadic_cloud(rng: &mut ChaCha8Rng, n: usize, half_extent_m: i64) -> PointCloud {
    let r = half_extent_m * 1024;
    PointCloud::new(
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-r..r) as f64 / 1024.0,
                    rng.gen_range(-r..r) as f64 / 1024.0,
                    rng.gen_range(-r..r) as f64 / 1024.0,
                )
            })
            .collect(),
    )
    .unwrap()
}

pub fn dyadic_translation(rng: &mut ChaCha8Rng, max_m: i64) -> nalgebra::Vector3<f64> {
    let r = max_m * 1024;
    nalgebra::Vector3::new(
        rng.gen_range(-r..r) as f64 / 1024.0,
        rng.gen_range(-r..r) as f64 / 1024.0,
        rng.gen_range(-r..r) as f64 / 1024.0,
    )
}

fn dense_matrix(d: &Dense) -> (DMatrix<f64>, DVector<f64>) {
    (
        DMatrix::from_row_slice(d.outputs, d.inputs, &d.weight),
        DVector::from_row_slice(&d.bias),
    )
}

/// Brute-force k nearest neighbours ordered by (squared distance, index).
pub fn brute_knn(xyz: &[[f64; 3]], i: usize, k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = xyz
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let d: f64 = (0..3).map(|a| (p[a] - xyz[i][a]).powi(2)).sum();
            (d, j)
        })
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.truncate(k);
    all
}

/// Straight-line descriptor forward: returns the outputs of stages 1..=4
/// for every point, built from nalgebra products over brute-force neighbourhoods.
pub fn descriptor_oracle(model: &DescriptorModel, xyz: &[[f64; 3]]) -> [Vec<DVector<f64>>; 4] {
    let k = model.neighbors();
    let [point, edge, mix, head] = model.stages();
    let (wp, bp) = dense_matrix(point);
    let (we, be) = dense_matrix(edge);
    let (wm, bm) = dense_matrix(mix);
    let (wh, bh) = dense_matrix(head);
    let mut l1 = Vec::new();
    let mut l2 = Vec::new();
    let mut l3 = Vec::new();
    let mut l4 = Vec::new();
    for i in 0..xyz.len() {
        let nb: Vec<usize> = brute_knn(xyz, i, k).into_iter().map(|x| x.1).collect();
        let mut mean = DVector::zeros(3);
        for &j in &nb {
            mean += DVector::from_row_slice(&xyz[j]);
        }
        let local = DVector::from_row_slice(&xyz[i]) - mean / k as f64;
        let h1 = (&wp * local + &bp).map(f64::tanh);
        let mut pooled = DVector::from_element(we.nrows(), f64::NEG_INFINITY);
        for &j in &nb {
            let off = DVector::from_row_slice(&xyz[j]) - DVector::from_row_slice(&xyz[i]);
            let e = (&we * off + &be).map(f64::tanh);
            pooled = pooled.zip_map(&e, f64::max);
        }
        let cat = DVector::from_iterator(h1.len() + pooled.len(), h1.iter().chain(pooled.iter()).copied());
        let h3 = (&wm * &cat + &bm).map(f64::tanh);
        let out = &wh * &h3 + &bh;
        l1.push(h1);
        l2.push(cat);
        l3.push(h3);
        l4.push(out);
    }
    [l1, l2, l3, l4]
}

pub fn layer_sum(model: &DescriptorModel, xyz: &[[f64; 3]], layer: usize) -> f64 {
    descriptor_oracle(model, xyz)[layer - 1]
        .iter()
        .map(|v| v.sum())
        .sum()
}

/// Smallest distance between the k-th and (k+1)-th neighbour and smallest
/// gap between the two largest edge activations of any pooled channel.
/// Central differences are only meaningful when both exceed the step size.
pub fn kink_margins(model: &DescriptorModel, xyz: &[[f64; 3]]) -> (f64, f64) {
    let k = model.neighbors();
    let [_, edge, _, _] = model.stages();
    let (we, be) = dense_matrix(edge);
    let mut knn_gap = f64::INFINITY;
    let mut pool_gap = f64::INFINITY;
    for i in 0..xyz.len() {
        let all = brute_knn(xyz, i, xyz.len());
        if all.len() > k {
            knn_gap = knn_gap.min(all[k].0.sqrt() - all[k - 1].0.sqrt());
        }
        let acts: Vec<DVector<f64>> = all[..k]
            .iter()
            .map(|&(_, j)| {
                let off = DVector::from_row_slice(&xyz[j]) - DVector::from_row_slice(&xyz[i]);
                (&we * off + &be).map(f64::tanh)
            })
            .collect();
        for c in 0..we.nrows() {
            let mut v: Vec<f64> = acts.iter().map(|a| a[c]).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if v.len() > 1 {
                pool_gap = pool_gap.min(v[0] - v[1]);
            }
        }
    }
    (knn_gap, pool_gap)
}

/// `|a − b| ≤ abs + rel·|b|`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs + rel * b.abs()
}

/// Draws a (model, cloud) instance whose neighbourhoods and pooled maxima are
/// at least `margin` away from switching.
pub fn smooth_instance(seed: u64, n: usize, margin: f64) -> (DescriptorModel, Vec<[f64; 3]>) {
    let mut r = rng(seed);
    let model = DescriptorModel::new(8, seed.wrapping_mul(7919));
    loop {
        let xyz = random_xyz(&mut r, n, 1.0);
        let (a, b) = kink_margins(&model, &xyz);
        if a > margin && b > margin {
            return (model, xyz);
        }
    }
}

/// Central finite difference of the layer sum with respect to coordinate `(i, a)`.
pub fn fd_input(model: &DescriptorModel, xyz: &[[f64; 3]], layer: usize, i: usize, a: usize, h: f64) -> f64 {
    let mut plus = xyz.to_vec();
    let mut minus = xyz.to_vec();
    plus[i][a] += h;
    minus[i][a] -= h;
    (layer_sum(model, &plus, layer) - layer_sum(model, &minus, layer)) / (2.0 * h)
}

/// Median by full sort; even counts average the middle pair.
pub fn sort_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Direct evaluation of `s_i = −Σ_j S_ij (x_ij − m_j) · r_i`.
pub fn saliency_score_oracle(field: &[[f64; 3]], xyz: &[[f64; 3]]) -> Vec<f64> {
    let m: Vec<f64> = (0..3)
        .map(|a| sort_median(xyz.iter().map(|p| p[a]).collect()))
        .collect();
    xyz.iter()
        .zip(field)
        .map(|(p, s)| {
            let off: Vec<f64> = (0..3).map(|a| p[a] - m[a]).collect();
            let r = off.iter().map(|o| o * o).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for j in 0..3 {
                acc += s[j] * off[j];
            }
            -acc * r
        })
        .collect()
}

/// Exhaustive maximum-entropy split: bins `[0, t)` against `[t, n)`,
/// first maximum wins; `None` if no split has mass on both sides.
pub fn kapur_oracle(hist: &[u64]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    let mut best: Option<(usize, f64)> = None;
    for t in 1..hist.len() {
        let lo: u64 = hist[..t].iter().sum();
        let hi = total - lo;
        if lo == 0 || hi == 0 {
            continue;
        }
        let ent = |part: &[u64], mass: u64| -> f64 {
            part.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / mass as f64;
                    -p * p.ln()
                })
                .sum()
        };
        let h = ent(&hist[..t], lo) + ent(&hist[t..], hi);
        if best.map_or(true, |(_, b)| h > b) {
            best = Some((t, h));
        }
    }
    best.map(|b| b.0)
}

/// Smallest top-1/top-2 gap of any max-pooled channel of `tanh(layer(p_j − p_i))`
/// over brute-force neighbourhoods.
pub fn edge_pool_margin(layer: &Dense, xyz: &[[f64; 3]], k: usize) -> f64 {
    let (w, b) = dense_matrix(layer);
    let mut gap = f64::INFINITY;
    for i in 0..xyz.len() {
        let vals: Vec<DVector<f64>> = brute_knn(xyz, i, k)
            .iter()
            .map(|&(_, j)| {
                let off = DVector::from_fn(3, |a, _| xyz[j][a] - xyz[i][a]);
                (&w * off + &b).map(f64::tanh)
            })
            .collect();
        for c in 0..layer.outputs {
            let mut v: Vec<f64> = vals.iter().map(|x| x[c]).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            gap = gap.min(v[0] - v[1]);
        }
    }
    gap
}

pub fn to_xyz(c: &PointCloud) -> Vec<[f64; 3]> {
    c.iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// Small random pair with an untrained detector (PCA fitted, head and encoder
/// freshly seeded) whose context pooling stays `margin` away from switching.
pub fn loss_instance(seed: u64, n: usize, margin: f64) -> (SkdDetector, PairInputs) {
    let mut r = rng(seed ^ 0x5eed);
    let descriptor = DescriptorModel::new(8, seed);
    let cfg = TrainConfig {
        epochs: 0,
        pretrain_epochs: 0,
        seed,
        ..TrainConfig::default()
    };
    loop {
        let k_xyz = random_xyz(&mut r, n, 1.0);
        let angle = r.gen_range(-0.3..0.3);
        let truth = RigidTransform::from_axis_angle(
            &Vector3::z(),
            angle,
            Vector3::new(r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), 0.0),
        );
        let l_pts: Vec<Point3> = k_xyz
            .iter()
            .map(|p| truth.apply(&Point3::new(p[0], p[1], p[2])) + Vector3::new(r.gen_range(-0.05..0.05), r.gen_range(-0.05..0.05), r.gen_range(-0.05..0.05)))
            .collect();
        let pair = TrainingPair {
            cloud_k: cloud(&k_xyz),
            cloud_l: PointCloud::new(l_pts).unwrap(),
            truth,
        };
        let (det, _) = SkdDetector::fit(&descriptor, std::slice::from_ref(&pair), &cfg).unwrap();
        let m = edge_pool_margin(&det.encoder.edge, &k_xyz, 8).min(edge_pool_margin(&det.encoder.edge, &to_xyz(&pair.cloud_l), 8));
        if m > margin {
            let inputs = det.pair_inputs(&pair, 0.1).unwrap();
            return (det, inputs);
        }
    }
}

/// Compares every analytic head and encoder parameter gradient with central
/// differences of the loss; returns descriptions of mismatches.
pub fn loss_fd_mismatches(det: &SkdDetector, inputs: &PairInputs, h: f64, rel: f64, abs: f64) -> Vec<String> {
    let (_, g_head, g_enc) = loss_and_gradients(&det.head, &det.encoder, inputs).unwrap();
    let mut bad = Vec::new();
    let g: Vec<f64> = g_head.params().copied().collect();
    for (p, &analytic) in g.iter().enumerate() {
        let eval = |delta: f64| {
            let mut head = det.head.clone();
            *head.params_mut().nth(p).unwrap() += delta;
            loss_and_gradients(&head, &det.encoder, inputs).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        if !close(analytic, fd, rel, abs) {
            bad.push(format!("head param {p}: analytic {analytic} fd {fd}"));
        }
    }
    let g: Vec<f64> = g_enc.params().copied().collect();
    for (p, &analytic) in g.iter().enumerate() {
        let eval = |delta: f64| {
            let mut enc = det.encoder.clone();
            *enc.params_mut().nth(p).unwrap() += delta;
            loss_and_gradients(&det.head, &enc, inputs).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        if !close(analytic, fd, rel, abs) {
            bad.push(format!("encoder param {p}: analytic {analytic} fd {fd}"));
        }
    }
    bad
}

/// Random `(field, xyz)` pair of `n ≤ 64` points for score oracles.
pub fn score_instance(seed: u64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut r = rng(seed.wrapping_add(0xa11ce));
    let n = r.gen_range(1..=64);
    let (extent, strength) = (r.gen_range(0.5..20.0), r.gen_range(0.01..5.0));
    let xyz = random_xyz(&mut r, n, extent);
    let field = random_xyz(&mut r, n, strength);
    (field, xyz)
}

pub fn field_of(rows: &[[f64; 3]]) -> skd_core::saliency::SaliencyField {
    skd_core::saliency::SaliencyField {
        values: DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]),
    }
}

pub fn mean_and_population_variance(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}
