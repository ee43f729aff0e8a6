mod common;

use common::*;
use nalgebra::DMatrix;
use rand::Rng;
use skd_core::descriptor::{DescriptorModel, LAYER_COUNT};
use skd_core::saliency::*;

#[test]
fn score_matches_direct_formula() {
    for seed in 0..100 {
        let (field, xyz) = score_instance(seed);
        let got = saliency_score(&field_of(&field), &cloud(&xyz)).unwrap();
        assert!(!got.normalized);
        let want = saliency_score_oracle(&field, &xyz);
        for (a, b) in got.values.iter().zip(&want) {
            assert!(close(*a, *b, 1e-12, 1e-12), "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn score_scales_with_square_of_coordinate_scale() {
    let (field, xyz) = score_instance(7);
    let base = saliency_score(&field_of(&field), &cloud(&xyz)).unwrap();
    for alpha in [0.25, 2.0, 8.0] {
        let scaled: Vec<[f64; 3]> = xyz.iter().map(|p| p.map(|v| v * alpha)).collect();
        let s = saliency_score(&field_of(&field), &cloud(&scaled)).unwrap();
        for (a, b) in s.values.iter().zip(&base.values) {
            assert_eq!(*a, b * alpha * alpha);
        }
    }
}

#[test]
fn initial_saliency_matches_oracle_activations() {
    let mut r = rng(31);
    for seed in 0..5 {
        let model = DescriptorModel::new(8, seed);
        let xyz = random_xyz(&mut r, 30, 2.0);
        let c = cloud(&xyz);
        let oracle = descriptor_oracle(&model, &xyz);
        for layer in 1..=LAYER_COUNT {
            let (acts, grads) = model.activations_and_gradient(&c, layer).unwrap();
            let field = initial_saliency(&acts, &grads).unwrap();
            for i in 0..30 {
                let w = oracle[layer - 1][i].sum();
                for a in 0..3 {
                    assert!(close(field.values[(i, a)], w * grads.values[(i, a)], 1e-12, 1e-14));
                }
            }
        }
    }
}

#[test]
fn normalized_scores_have_zero_mean_unit_variance() {
    for seed in 0..100 {
        let (field, xyz) = score_instance(seed);
        let raw = saliency_score(&field_of(&field), &cloud(&xyz)).unwrap();
        let norm = normalize_scores(&raw);
        assert!(norm.normalized);
        let (mean, var) = mean_and_population_variance(&raw.values);
        if var.sqrt() < DEGENERATE_STD {
            assert!(norm.values.iter().all(|&v| v == 0.0));
            continue;
        }
        let (m, v) = mean_and_population_variance(&norm.values);
        assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9, "seed {seed}: {m} {v} (raw mean {mean})");
    }
}

#[test]
fn degenerate_scores_normalize_to_zero() {
    let constant = SaliencyScore { values: vec![3.5; 10], normalized: false };
    assert!(normalize_scores(&constant).values.iter().all(|&v| v == 0.0));
    let single = SaliencyScore { values: vec![-2.0], normalized: false };
    assert_eq!(normalize_scores(&single).values, vec![0.0]);
    let zero_field = saliency_score(&field_of(&[[0.0; 3]; 5]), &cloud(&random_xyz(&mut rng(1), 5, 1.0))).unwrap();
    assert!(normalize_scores(&zero_field).values.iter().all(|&v| v == 0.0));
}

#[test]
fn normalization_preserves_ranking() {
    let mut r = rng(32);
    for _ in 0..20 {
        let v: Vec<f64> = (0..40).map(|_| r.gen_range(-100.0..100.0)).collect();
        let n = normalize_scores(&SaliencyScore { values: v.clone(), normalized: false });
        for i in 0..40 {
            for j in 0..40 {
                if v[i] < v[j] {
                    assert!(n.values[i] < n.values[j]);
                }
            }
        }
    }
}

#[test]
fn full_chain_is_translation_invariant_on_dyadic_clouds() {
    let mut r = rng(33);
    let model = DescriptorModel::new(8, 5);
    for _ in 0..5 {
        let c = dyadic_cloud(&mut r, 40, 4);
        let t = dyadic_translation(&mut r, 1000);
        for layer in 1..=LAYER_COUNT {
            assert_eq!(
                cloud_saliency(&model, &c, layer).unwrap(),
                cloud_saliency(&model, &c.translated(&t), layer).unwrap()
            );
        }
    }
}

#[test]
fn shape_mismatch_is_reported() {
    let field = SaliencyField { values: DMatrix::zeros(4, 3) };
    assert!(saliency_score(&field, &cloud(&random_xyz(&mut rng(2), 5, 1.0))).is_err());
}
