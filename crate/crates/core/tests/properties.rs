//! Invariants checked over generated inputs.

use nalgebra::{Matrix3, Point3, Vector3};
use proptest::prelude::*;

use semshape::eval::{iou3d, ndeg_mcm_map, pose_error, PoseError};
use semshape::geometry::{
    chamfer_distance, farthest_point_sample, kmeanspp_init, object_aware_filter,
};
use semshape::io::{feat_from_bytes, feat_to_bytes};
use semshape::semantics::build_semantic_prototype;
use semshape::shape::{model_from_bytes, model_to_bytes, LinearShapeModel};
use semshape::spatial::knn;
use semshape::synth::Symmetry;
use semshape::transform::{axis_angle, rotation_angle_deg};
use semshape::umeyama::umeyama_solve;
use semshape::{FeatureMatrix, Pose, SemanticCloud, Space};

fn point() -> impl Strategy<Value = Point3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn points(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Point3<f64>>> {
    prop::collection::vec(point(), n)
}

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    (point(), 0.0..std::f64::consts::PI).prop_filter_map("zero axis", |(a, angle)| {
        (a.coords.norm() > 1e-3).then(|| axis_angle(&a.coords, angle))
    })
}

fn pose() -> impl Strategy<Value = Pose> {
    (rotation(), point(), (0.1..2.0f64, 0.1..2.0f64, 0.1..2.0f64))
        .prop_map(|(r, t, (a, b, c))| Pose::new(r, t.coords, Vector3::new(a, b, c)).unwrap())
}

fn nocs(p: Vec<Point3<f64>>) -> SemanticCloud {
    SemanticCloud::from_points(p, Space::Nocs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_self_is_zero(p in points(1..=40), sq: bool, sym: bool) {
        let a = nocs(p);
        prop_assert_eq!(chamfer_distance(&a, &a, sq, sym).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_chamfer_commutes(a in points(1..=40), b in points(1..=40), sq: bool) {
        let (a, b) = (nocs(a), nocs(b));
        prop_assert_eq!(chamfer_distance(&a, &b, sq, true).unwrap(), chamfer_distance(&b, &a, sq, true).unwrap());
    }

    #[test]
    fn chamfer_rigid_invariant(a in points(1..=40), b in points(1..=40), r in rotation(), t in point(), sq: bool) {
        let m = |c: &[Point3<f64>]| nocs(c.iter().map(|p| r * p + t.coords).collect());
        let before = chamfer_distance(&nocs(a.clone()), &nocs(b.clone()), sq, true).unwrap();
        let after = chamfer_distance(&m(&a), &m(&b), sq, true).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn knn_sorted_and_exact(p in points(1..=60), q in point(), k in 1usize..60) {
        let c = nocs(p.clone());
        let k = k.min(p.len());
        let got = knn(&q, &c, k).unwrap();
        let mut all: Vec<(f64, usize)> = p.iter().enumerate().map(|(i, x)| ((x - q).norm_squared(), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        prop_assert_eq!(got, all[..k].iter().map(|e| e.1).collect::<Vec<_>>());
    }

    #[test]
    fn samplers_are_deterministic(p in points(8..=60), seed: u64, count in 1usize..8) {
        let c = nocs(p);
        prop_assert_eq!(farthest_point_sample(&c, count, seed).unwrap(), farthest_point_sample(&c, count, seed).unwrap());
        let corpus = [c.clone(), c];
        prop_assert_eq!(kmeanspp_init(&corpus, count, seed).unwrap(), kmeanspp_init(&corpus, count, seed).unwrap());
    }

    #[test]
    fn filter_keeps_ordered_subset(model in points(1..=30), cam in points(0..=30), p in pose(), tau in 0.01..1.0f64) {
        let cam = SemanticCloud::new(cam, None, Space::Camera).unwrap();
        let out = object_aware_filter(&cam, &nocs(model), &p, tau).unwrap();
        prop_assert!(out.kept.windows(2).all(|w| w[0] < w[1]));
        for (j, &i) in out.kept.iter().enumerate() {
            prop_assert_eq!(out.cloud.points()[j], cam.points()[i]);
        }
        prop_assert_eq!(out.all_outliers, out.kept.is_empty());
    }

    #[test]
    fn umeyama_round_trip(p in points(4..=40), r in rotation(), t in point(), s in 0.1..5.0f64) {
        let src = nocs(p);
        // skip near-collinear draws, which the solver rejects by contract
        let dst = src.map_points(Space::Camera, |x| Point3::from(s * (r * x.coords) + t.coords)).unwrap();
        if let Ok(est) = umeyama_solve(&src, &dst, true) {
            prop_assert!(rotation_angle_deg(&est.rotation, &r) < 1e-5);
            prop_assert!((est.scale - s).abs() < 1e-8);
            prop_assert!((est.translation - t.coords).norm() < 1e-8);
        }
    }

    #[test]
    fn pose_error_symmetric_in_rotation(a in pose(), b in pose()) {
        for sym in [Symmetry::None, Symmetry::AxialZ] {
            let ab = pose_error(&a, &b, sym).unwrap();
            let ba = pose_error(&b, &a, sym).unwrap();
            prop_assert!((ab.rot_deg - ba.rot_deg).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_invariant_under_common_motion(a in pose(), b in pose(), r in rotation(), t in point()) {
        let (a2, b2) = (a.transformed(&r, &t.coords), b.transformed(&r, &t.coords));
        for sym in [Symmetry::None, Symmetry::AxialZ] {
            let e1 = pose_error(&a, &b, sym).unwrap();
            let e2 = pose_error(&a2, &b2, sym).unwrap();
            prop_assert!((e1.rot_deg - e2.rot_deg).abs() < 1e-6);
            prop_assert!((e1.trans_m - e2.trans_m).abs() < 1e-6);
        }
        prop_assert!((iou3d(&a, &b).unwrap().iou - iou3d(&a2, &b2).unwrap().iou).abs() < 1e-6);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in pose(), b in pose()) {
        let ab = iou3d(&a, &b).unwrap().iou;
        let ba = iou3d(&b, &a).unwrap().iou;
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((iou3d(&a, &a).unwrap().iou - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ndeg_monotone_in_thresholds(
        errs in prop::collection::vec((0.0..20.0f64, 0.0..0.1f64), 1..50),
        n in 0.0..20.0f64, dn in 0.0..5.0f64, m in 0.0..10.0f64, dm in 0.0..5.0f64,
    ) {
        let e: Vec<PoseError> = errs.into_iter().map(|(r, t)| PoseError { rot_deg: r, trans_m: t }).collect();
        let v = ndeg_mcm_map(&e, &[(n, m), (n + dn, m), (n, m + dm)]).unwrap();
        prop_assert!(v[0] <= v[1] && v[0] <= v[2]);
        prop_assert!(v.iter().all(|x| (0.0..=100.0).contains(x)));
    }

    #[test]
    fn prototype_mean_is_permutation_invariant(
        vals in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 6), 2..8),
        rot in 0usize..8,
    ) {
        let mats: Vec<FeatureMatrix> = vals.iter().map(|v| FeatureMatrix::from_row_major(2, 3, v.clone()).unwrap()).collect();
        let mut shuffled = mats.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(build_semantic_prototype(&mats).unwrap(), build_semantic_prototype(&shuffled).unwrap());
    }

    #[test]
    fn feat_bytes_round_trip(v in prop::collection::vec(-1e6..1e6f32, 1..64), cols in 1usize..4) {
        let rows = v.len() / cols;
        prop_assume!(rows > 0);
        let data: Vec<f64> = v[..rows * cols].iter().map(|x| *x as f64).collect();
        let m = FeatureMatrix::from_row_major(rows, cols, data).unwrap();
        prop_assert_eq!(feat_from_bytes(&feat_to_bytes(&m)).unwrap(), m);
    }

    #[test]
    fn model_bytes_round_trip(proto in prop::collection::vec((-1.0..1.0f32, -1.0..1.0f32, -1.0..1.0f32), 3..20), d in 0usize..3) {
        let pts: Vec<Point3<f64>> = proto.iter().map(|&(x, y, z)| Point3::new(x as f64, y as f64, z as f64)).collect();
        let basis: Vec<Vec<Vector3<f64>>> = (0..d).map(|k| pts.iter().map(|p| p.coords * (k as f64 + 0.5)).collect()).collect();
        let mut m = LinearShapeModel::new("c", pts, basis, None).unwrap();
        m.quantize();
        let bytes = model_to_bytes(&m);
        prop_assert_eq!(model_to_bytes(&model_from_bytes(&bytes).unwrap()), bytes);
    }
}
