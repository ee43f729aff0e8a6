mod common;

use common::*;
use nalgebra::DMatrix;
use rand::Rng;
use skd_core::descriptor::DescriptorModel;
use skd_core::detector::*;
use skd_core::geom::{PointCloud, RigidTransform, Vector3};
use skd_core::Error;

fn pair_of(cloud_k: PointCloud, cloud_l: PointCloud, truth: RigidTransform) -> TrainingPair {
    TrainingPair { cloud_k, cloud_l, truth }
}

#[test]
fn self_pair_labels_every_point_positive() {
    let c = cloud(&random_xyz(&mut rng(3), 40, 2.0));
    let desc = DescriptorModel::new(8, 1).describe(&c).unwrap();
    let labels = label_correspondences(&pair_of(c.clone(), c, RigidTransform::identity()), &desc, &desc, 0.1).unwrap();
    for (i, l) in labels.k_side.iter().chain(&labels.l_side).enumerate() {
        assert!(l.positive);
        assert_eq!(l.matched, Some(i % 40));
    }
    assert_eq!(labels.positives(), 80);
}

#[test]
fn far_apart_pair_has_no_positives() {
    let c = cloud(&random_xyz(&mut rng(4), 30, 1.0));
    let desc = DescriptorModel::new(8, 1).describe(&c).unwrap();
    let truth = RigidTransform::from_translation(Vector3::new(1000.0, 0.0, 0.0));
    let labels = label_correspondences(&pair_of(c.clone(), c, truth), &desc, &desc, 0.5).unwrap();
    assert_eq!(labels.positives(), 0);
}

#[test]
fn labels_match_double_loop_oracle() {
    let mut r = rng(5);
    for trial in 0..10 {
        let (na, nb) = (r.gen_range(5..40), r.gen_range(5..40));
        let a = random_xyz(&mut r, na, 1.0);
        let b = random_xyz(&mut r, nb, 1.0);
        // coarse descriptor values so ties occur
        let da = DMatrix::from_fn(na, 3, |_, _| r.gen_range(0..3) as f64);
        let db = DMatrix::from_fn(nb, 3, |_, _| r.gen_range(0..3) as f64);
        let truth = RigidTransform::from_axis_angle(&Vector3::z(), r.gen_range(-1.0..1.0), Vector3::new(0.1, -0.2, 0.05));
        let tau = 0.6;
        let labels = label_correspondences(&pair_of(cloud(&a), cloud(&b), truth), &da, &db, tau).unwrap();

        let oracle = |from: &[[f64; 3]], to: &[[f64; 3]], df: &DMatrix<f64>, dt: &DMatrix<f64>, t: &RigidTransform| {
            (0..from.len())
                .map(|i| {
                    let mut best = (f64::INFINITY, 0);
                    for j in 0..to.len() {
                        let d: f64 = (0..3).map(|c| (df[(i, c)] - dt[(j, c)]).powi(2)).sum();
                        if d < best.0 {
                            best = (d, j);
                        }
                    }
                    let p = t.apply(&nalgebra::Point3::from(from[i]));
                    let q = nalgebra::Point3::from(to[best.1]);
                    ((p - q).norm() <= tau, best.1)
                })
                .collect::<Vec<_>>()
        };
        let k_side = oracle(&a, &b, &da, &db, &truth);
        let l_side = oracle(&b, &a, &db, &da, &truth.invert());
        for (l, (pos, m)) in labels.k_side.iter().zip(&k_side).chain(labels.l_side.iter().zip(&l_side)) {
            assert_eq!((l.positive, l.matched), (*pos, Some(*m)), "trial {trial}");
        }
    }
}

#[test]
fn label_shape_errors() {
    let c = cloud(&random_xyz(&mut rng(6), 10, 1.0));
    let d = DMatrix::zeros(9, 8);
    let pair = pair_of(c.clone(), c, RigidTransform::identity());
    assert!(matches!(label_correspondences(&pair, &d, &d, 0.5), Err(Error::ShapeMismatch(_))));
}

#[test]
fn head_probabilities_match_straight_line_softmax() {
    let head = KeypointHead::new(6, 11);
    let mut r = rng(7);
    let x = DMatrix::from_fn(25, 6, |_, _| r.gen_range(-2.0..2.0));
    let out = head.forward(&x).unwrap();
    let w1 = DMatrix::from_row_slice(16, 6, &head.hidden.weight);
    let w2 = DMatrix::from_row_slice(2, 16, &head.logits.weight);
    for i in 0..25 {
        let h = (&w1 * x.row(i).transpose() + nalgebra::DVector::from_row_slice(&head.hidden.bias)).map(f64::tanh);
        let l = &w2 * h + nalgebra::DVector::from_row_slice(&head.logits.bias);
        let p = 1.0 / (1.0 + (l[0] - l[1]).exp());
        assert!(close(out.probabilities[i], p, 1e-12, 1e-15));
        assert!(close(out.logits[(i, KEYPOINT_CLASS)], l[1], 1e-12, 1e-15));
    }
}

#[test]
fn balanced_loss_by_hand() {
    // one positive, three negatives: w_pos = 3, w_neg = 1
    let logits = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, -1.0, 0.5, 0.5, -2.0, 2.0]);
    let labels = [true, false, false, false];
    let (loss, _) = balanced_loss(&logits, &labels).unwrap();
    let ce = |l0: f64, l1: f64, y: usize| -> f64 {
        let lse = (l0.exp() + l1.exp()).ln();
        lse - if y == 1 { l1 } else { l0 }
    };
    let expected = (3.0 * ce(0.0, 0.0, 1) + ce(1.0, -1.0, 0) + ce(0.5, 0.5, 0) + ce(-2.0, 2.0, 0)) / 4.0;
    assert!(close(loss, expected, 1e-14, 0.0));
    assert_eq!(class_weights(1, 3), (3.0, 1.0));
    assert_eq!(class_weights(0, 5), (5.0, 1.0));
}

#[test]
fn balanced_loss_logit_gradient_matches_fd() {
    let mut r = rng(8);
    let logits = DMatrix::from_fn(12, 2, |_, _| r.gen_range(-3.0..3.0));
    let labels: Vec<bool> = (0..12).map(|_| r.gen_bool(0.3)).collect();
    let (_, grad) = balanced_loss(&logits, &labels).unwrap();
    let h = 1e-6;
    for i in 0..12 {
        for c in 0..2 {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[(i, c)] += h;
            m[(i, c)] -= h;
            let fd = (balanced_loss(&p, &labels).unwrap().0 - balanced_loss(&m, &labels).unwrap().0) / (2.0 * h);
            assert!(close(grad[(i, c)], fd, 1e-5, 1e-8), "({i},{c}) {} vs {fd}", grad[(i, c)]);
        }
    }
}

#[test]
fn loss_parameter_gradients_match_fd() {
    for seed in 0..3 {
        let (det, inputs) = loss_instance(seed, 30, 2e-5);
        let bad = loss_fd_mismatches(&det, &inputs, 1e-6, 1e-5, 1e-8);
        assert!(bad.is_empty(), "seed {seed}: {bad:?}");
    }
}

#[test]
fn zero_epochs_leave_weights_untouched() {
    let (det, inputs) = loss_instance(1, 30, 0.0);
    let mut head = det.head.clone();
    let mut enc = det.encoder.clone();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let trace = train(&mut head, &mut enc, std::slice::from_ref(&inputs), &cfg).unwrap();
    assert!(trace.is_empty());
    assert_eq!(head, det.head);
    assert_eq!(enc, det.encoder);
}

#[test]
fn training_lowers_the_loss_and_is_reproducible() {
    let (det, inputs) = loss_instance(2, 40, 0.0);
    let cfg = TrainConfig { epochs: 60, ..TrainConfig::default() };
    let run = || {
        let mut head = det.head.clone();
        let mut enc = det.encoder.clone();
        let trace = train(&mut head, &mut enc, std::slice::from_ref(&inputs), &cfg).unwrap();
        (head, enc, trace)
    };
    let (h1, e1, t1) = run();
    let (h2, e2, t2) = run();
    assert_eq!(t1.len(), 60);
    assert!(t1.last().unwrap() < &t1[0]);
    assert_eq!((h1, e1, t1), (h2, e2, t2));
}

fn small_detector(seed: u64) -> SkdDetector {
    let (det, _) = loss_instance(seed, 40, 0.0);
    det
}

#[test]
fn detector_checkpoint_round_trip() {
    let det = small_detector(3);
    let back = SkdDetector::from_checkpoint(&skd_core::checkpoint::Checkpoint::parse(&det.to_checkpoint().to_text()).unwrap()).unwrap();
    assert_eq!(back, det);
    let c = cloud(&random_xyz(&mut rng(9), 50, 1.5));
    assert_eq!(back.probabilities(&c).unwrap(), det.probabilities(&c).unwrap());
    let wrong = DescriptorModel::new(8, 0).to_checkpoint();
    assert!(SkdDetector::from_checkpoint(&wrong).is_err());
}

#[test]
fn detect_topk_is_translation_consistent_on_dyadic_clouds() {
    let det = small_detector(4);
    let mut r = rng(10);
    for _ in 0..10 {
        let c = dyadic_cloud(&mut r, 48, 4);
        let t = dyadic_translation(&mut r, 500);
        let a = det.detect_topk(&c, 12).unwrap();
        let b = det.detect_topk(&c.translated(&t), 12).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.scores, b.scores);
    }
}

#[test]
fn detect_topk_bounds() {
    let det = small_detector(5);
    let c = cloud(&random_xyz(&mut rng(11), 20, 1.0));
    assert!(matches!(det.detect_topk(&c, 21), Err(Error::KTooLarge { k: 21, n: 20 })));
    assert!(det.detect_topk(&c, 0).is_err());
    assert_eq!(det.detect_topk(&c, 20).unwrap().len(), 20);
}

#[test]
fn top_k_matches_stable_sort_and_ignores_monotone_maps() {
    let mut r = rng(12);
    for _ in 0..50 {
        let n = r.gen_range(1..60);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 / 4.0).collect();
        let k = r.gen_range(1..=n);
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort by descending score keeps lower indices first among ties
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let got = top_k(&scores, k).unwrap();
        assert_eq!(got.indices, order[..k]);
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
        assert_eq!(top_k(&mapped, k).unwrap().indices, got.indices);
    }
}

#[test]
fn kapur_matches_exhaustive_oracle() {
    let mut r = rng(13);
    for _ in 0..300 {
        let hist: Vec<u64> = (0..32)
            .map(|_| if r.gen_bool(0.3) { 0 } else { r.gen_range(0..50) })
            .collect();
        if hist.iter().all(|&c| c == 0) {
            continue;
        }
        let expected = kapur_oracle(&hist).unwrap_or_else(|| hist.iter().position(|&c| c > 0).unwrap());
        assert_eq!(kapur_threshold(&hist).unwrap(), expected, "{hist:?}");
    }
}

#[test]
fn elf3d_output_respects_threshold_and_suppression() {
    let model = DescriptorModel::new(8, 21);
    let mut r = rng(14);
    for _ in 0..5 {
        let c = cloud(&random_xyz(&mut r, 200, 3.0));
        let g = model.input_gradient(&c, 2).unwrap();
        let radius = 0.4;
        let ks = elf3d_detect(&g, &c, radius, 32).unwrap();
        assert!(!ks.is_empty());
        let norms: Vec<f64> = g.values.row_iter().map(|row| row.norm()).collect();
        let (hist, bins) = gradient_histogram(&norms, 32);
        let t = kapur_threshold(&hist).unwrap();
        for (a, &i) in ks.indices.iter().enumerate() {
            assert!(bins[i] >= t);
            assert_eq!(ks.scores[a], norms[i]);
            for &j in &ks.indices[..a] {
                assert!((c.point(i) - c.point(j)).norm() > radius);
            }
        }
        // every surviving candidate is covered by a stronger kept point
        for i in (0..c.len()).filter(|&i| bins[i] >= t) {
            assert!(ks.indices.iter().any(|&k| (c.point(i) - c.point(k)).norm() <= radius && norms[k] >= norms[i]));
        }
    }
}

#[test]
fn random_detector_returns_distinct_indices() {
    let ks = random_detect(500, 256, 3).unwrap();
    let mut v = ks.indices.clone();
    v.sort();
    v.dedup();
    assert_eq!(v.len(), 256);
    assert!(v.iter().all(|&i| i < 500));
}
