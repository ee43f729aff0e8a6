mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use skd_core::geom::*;
use skd_core::Error;

fn random_rigid(r: &mut impl Rng) -> RigidTransform {
    let axis = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
    RigidTransform::from_axis_angle(
        &axis,
        r.gen_range(-3.1..3.1),
        Vector3::new(r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)),
    )
}

#[test]
fn quarter_turn_about_z() {
    let c = PointCloud::from_xyz(&[[1.0, 0.0, 0.0]]).unwrap();
    let t = RigidTransform::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
    let p = c.apply_transform(&t);
    assert!((p.point(0) - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
}

#[test]
fn transform_then_inverse_restores_cloud() {
    let mut r = rng(1);
    for _ in 0..20 {
        let c = cloud(&random_xyz(&mut r, 50, 10.0));
        let t = random_rigid(&mut r);
        let back = c.apply_transform(&t).apply_transform(&t.invert());
        for (a, b) in back.iter().zip(c.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}

#[test]
fn umeyama_recovers_forward_generated_transforms() {
    let mut r = rng(2);
    for _ in 0..100 {
        let n = r.gen_range(3..60);
        let src = cloud(&random_xyz(&mut r, n, 5.0));
        let t = random_rigid(&mut r);
        let dst = src.apply_transform(&t);
        let est = umeyama_fit(src.points(), dst.points()).unwrap();
        assert!((est.rotation() - t.rotation()).abs().max() < 1e-9);
        assert!((est.translation() - t.translation()).abs().max() < 1e-9);
        assert!((est.rotation().determinant() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn umeyama_rejects_degenerate_input() {
    let line: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
    assert!(matches!(umeyama_fit(&line, &line), Err(Error::DegenerateConfiguration(_))));
    let same = vec![Point3::new(1.0, 1.0, 1.0); 4];
    assert!(matches!(umeyama_fit(&same, &same), Err(Error::DegenerateConfiguration(_))));
}

#[test]
fn median_center_follows_translations() {
    let mut r = rng(3);
    for _ in 0..20 {
        let c = dyadic_cloud(&mut r, 31, 8);
        let t = dyadic_translation(&mut r, 100);
        let m = median_center(&c);
        assert_eq!(median_center(&c.translated(&t)), m + t);
        let xs: Vec<f64> = c.iter().map(|p| p.x).collect();
        assert_eq!(m.x, sort_median(xs));
    }
}

#[test]
fn knn_graph_matches_brute_force() {
    let mut r = rng(4);
    let xyz = random_xyz(&mut r, 120, 3.0);
    let g = knn_graph(&cloud(&xyz), 8).unwrap();
    for i in 0..120 {
        let want: Vec<usize> = brute_knn(&xyz, i, 8).into_iter().map(|(_, j)| j).collect();
        assert_eq!(&g[i * 8..(i + 1) * 8], &want[..]);
    }
    assert!(matches!(knn_graph(&cloud(&xyz[..5]), 8), Err(Error::CloudTooSmall { needed: 8, got: 5 })));
}

#[test]
fn construction_rejects_bad_clouds() {
    assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
    assert!(matches!(PointCloud::from_xyz(&[[0.0, f64::NAN, 0.0]]), Err(Error::NonFinite(0))));
}

proptest! {
    #[test]
    fn rigid_transforms_preserve_pairwise_distances(
        pts in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 2..30),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in -3.2f64..3.2,
        shift in prop::array::uniform3(-1e3f64..1e3),
    ) {
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let c = PointCloud::from_xyz(&pts).unwrap();
        let t = RigidTransform::from_axis_angle(&axis, angle, Vector3::from(shift));
        let m = c.apply_transform(&t);
        for i in 0..pts.len() {
            for j in 0..i {
                let before = (c.point(i) - c.point(j)).norm();
                let after = (m.point(i) - m.point(j)).norm();
                prop_assert!((before - after).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn relative_rotation_error_is_conjugation_invariant(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (a, b, g) = (random_rigid(&mut r), random_rigid(&mut r), random_rigid(&mut r));
        let (_, rre) = skd_core::evaluation::rte_rre(&a, &b);
        let (_, rre_c) = skd_core::evaluation::rte_rre(&g.compose(&a).compose(&g.invert()), &g.compose(&b).compose(&g.invert()));
        prop_assert!((rre - rre_c).abs() < 1e-9, "{} vs {}", rre, rre_c);
    }
}
