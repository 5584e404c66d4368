use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use scenepose_core::environment::{crop_circular, crop_square, EnvironmentCloud};
use scenepose_core::metrics::{jitter, mpjpe, mpjve};
use scenepose_core::rotations::{
    axis_angle, geodesic_angle, matrix_to_rot6d, orthonormality, rot6d_to_matrix, Rot6D,
};
use scenepose_core::skeleton::{
    body_capsules, forward_kinematics, occupancy, JointPositions, JointSpec, KinematicTree,
    SkeletonConfig,
};

fn rotvec() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-3.0f64..3.0).prop_map(Vector3::from)
}

fn random_pose(rotvecs: &[Vector3<f64>]) -> Vec<f64> {
    rotvecs
        .iter()
        .flat_map(|v| matrix_to_rot6d(&axis_angle(v)).unwrap().0)
        .collect()
}

proptest! {
    #[test]
    fn rotation_round_trip(v in rotvec()) {
        let r = axis_angle(&v);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r).unwrap()).unwrap();
        prop_assert!((back - r).abs().max() < 1e-9);
    }

    #[test]
    fn decoded_6d_is_a_rotation(raw in prop::array::uniform6(-2.0f64..2.0)) {
        let r6 = Rot6D(raw);
        if let Ok(m) = rot6d_to_matrix(&r6) {
            let (residual, det) = orthonormality(&m);
            prop_assert!(residual < 1e-9);
            prop_assert!((det - 1.0).abs() < 1e-9);
            let again = rot6d_to_matrix(&matrix_to_rot6d(&m).unwrap()).unwrap();
            prop_assert!((again - m).abs().max() < 1e-12);
        }
    }

    #[test]
    fn geodesic_is_a_symmetric_angle(a in rotvec(), b in rotvec()) {
        let (ra, rb) = (axis_angle(&a), axis_angle(&b));
        let d = geodesic_angle(&ra, &rb);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&d));
        prop_assert_eq!(d, geodesic_angle(&rb, &ra));
        prop_assert!(geodesic_angle(&ra, &ra) < 1e-6);
    }

    #[test]
    fn fk_keeps_bone_lengths(vs in prop::collection::vec(rotvec(), 22), t in prop::array::uniform3(-5.0f64..5.0)) {
        let tree = KinematicTree::smpl_lite();
        let fk = forward_kinematics(&random_pose(&vs), &[Vector3::from(t)], &tree).unwrap();
        prop_assert!((fk.positions.get(0, 0) - Vector3::from(t)).norm() < 1e-12);
        for (p, c) in tree.bones() {
            let len = (fk.positions.get(0, c) - fk.positions.get(0, p)).norm();
            prop_assert!((len - tree.offset(c).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn fk_matches_brute_force_chain(vs in prop::collection::vec(rotvec(), 5), offs in prop::collection::vec(prop::array::uniform3(-0.5f64..0.5), 5)) {
        let joints = offs
            .iter()
            .enumerate()
            .map(|(j, o)| JointSpec {
                name: format!("j{j}"),
                parent: j as i32 - 1,
                offset: if j == 0 { [0.0; 3] } else { *o },
                radius: 0.05,
            })
            .collect();
        let tree = KinematicTree::from_config(&SkeletonConfig { joints }).unwrap();
        let fk = forward_kinematics(&random_pose(&vs), &[Vector3::zeros()], &tree).unwrap();
        // Explicit products, written out per joint.
        let r: Vec<Matrix3<f64>> = vs.iter().map(axis_angle).collect();
        let mut g = Matrix3::identity();
        let mut p = Vector3::zeros();
        for j in 0..5 {
            if j > 0 {
                p += g * Vector3::from(offs[j]);
            }
            g *= r[j];
            prop_assert!((fk.positions.get(0, j) - p).norm() < 1e-9);
            prop_assert!((fk.global_rotations[j] - g).abs().max() < 1e-9);
        }
    }

    #[test]
    fn occupancy_sign_and_lipschitz(
        vs in prop::collection::vec(prop::array::uniform3(-0.4f64..0.4).prop_map(Vector3::from), 22),
        q in prop::array::uniform3(-1.0f64..1.0),
        dq in prop::array::uniform3(-0.05f64..0.05),
    ) {
        let tree = KinematicTree::smpl_lite();
        let fk = forward_kinematics(&random_pose(&vs), &[Vector3::new(0.0, 0.0, 0.0)], &tree).unwrap();
        let caps = body_capsules(fk.positions.frame(0), &tree, tree.bone_radii());
        let a = Vector3::from(q);
        let b = a + Vector3::from(dq);
        let (fa, fb) = (occupancy(&caps, &a), occupancy(&caps, &b));
        prop_assert!((fa - fb).abs() <= (a - b).norm() / tree.min_radius() + 1e-12);
        let inside = caps.capsules.iter().any(|c| c.distance_to_axis(&a) < c.radius);
        prop_assert_eq!(fa > 0.0, inside);
    }

    #[test]
    fn crops_have_exact_cardinality_and_stay_inside(
        pts in prop::collection::vec(prop::array::uniform3(-3.0f32..3.0), 1..400),
        cx in -2.0f64..2.0, cy in -2.0f64..2.0, seed in any::<u64>(),
    ) {
        let pts: Vec<[f32; 3]> = pts.into_iter().map(|p| [p[0], p[1], p[2].abs()]).collect();
        let cloud = EnvironmentCloud::with_inferred_ground(pts, 0.0).unwrap();
        let c = crop_circular(&cloud, [cx, cy], 1.0, 1000, seed);
        prop_assert_eq!(c.len(), 1000);
        for p in &c.points {
            let d2 = (p[0] as f64 - cx).powi(2) + (p[1] as f64 - cy).powi(2);
            prop_assert!(d2 <= 1.0 + 1e-5);
        }
        let s = crop_square(&cloud, [cx, cy], 1.0, 1000, seed);
        prop_assert_eq!(s.len(), 1000);
        for p in &s.points {
            prop_assert!((p[0] as f64 - cx).abs() <= 1.0 + 1e-5 && (p[1] as f64 - cy).abs() <= 1.0 + 1e-5);
        }
        prop_assert_eq!(c, crop_circular(&cloud, [cx, cy], 1.0, 1000, seed));
    }

    #[test]
    fn velocity_error_ignores_constant_offsets(
        xs in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 12),
        off in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let gt = JointPositions::new(2, xs.iter().map(|&x| Vector3::from(x)).collect());
        let pred = gt.translated(&vec![Vector3::from(off); 6]);
        prop_assert!(mpjve(&pred, &gt, 30.0).unwrap() < 1e-6);
        let expect = Vector3::from(off).norm() * 1000.0;
        prop_assert!((mpjpe(&pred, &gt).unwrap() - expect).abs() < 1e-6);
    }
}

#[test]
fn sinusoid_jitter_matches_closed_form() {
    // x(t) = A sin(2πft): mean |x'''| = A (2πf)³ · 2/π, reported in 10² m/s³.
    let (a, f, fps) = (0.01f64, 1.0f64, 30.0f64);
    let frames = 5 * fps as usize + 3;
    let data = (0..frames)
        .map(|t| Vector3::new(a * (2.0 * std::f64::consts::PI * f * t as f64 / fps).sin(), 0.0, 0.0))
        .collect();
    let got = jitter(&JointPositions::new(1, data), fps).unwrap();
    let expected = 0.015_791;
    assert!((got - expected).abs() / expected < 0.02, "{got}");
}
