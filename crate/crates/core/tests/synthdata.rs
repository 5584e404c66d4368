use nalgebra::Vector3;
use scenepose_core::environment::GROUND_BAND;
use scenepose_core::skeleton::{body_capsules, KinematicTree, HEAD};
use scenepose_core::synthdata::{
    generate_episode, label_contacts, make_dataset, penetration_depth, sequence_seed, Dataset,
    DatasetSpec, MotionKind, PrimitiveKind, SceneSpec, Split, CONTACT_DISTANCE, MAX_PENETRATION,
};

#[test]
fn every_kind_generates_clean_labeled_motion() {
    let tree = KinematicTree::smpl_lite();
    let spec = SceneSpec::default();
    for (i, kind) in MotionKind::ALL.into_iter().enumerate() {
        for rep in 0..3u64 {
            let (_, scene, seq) = generate_episode(1000 + 17 * i as u64 + rep, kind, &spec, &tree)
                .unwrap_or_else(|e| panic!("{kind:?}: {e}"));
            assert!(seq.n_frames() >= 40);
            let fk = seq.motion().forward_kinematics(&tree).unwrap();
            for t in 0..seq.n_frames() {
                let caps = body_capsules(fk.positions.frame(t), &tree, tree.bone_radii());
                assert!(penetration_depth(&caps, &scene.primitives, true) <= MAX_PENETRATION);
            }
            assert_eq!(
                seq.contacts,
                label_contacts(&fk.positions, &scene.primitives, CONTACT_DISTANCE)
            );
            // Bones keep their rest lengths.
            for t in [0, seq.n_frames() / 2, seq.n_frames() - 1] {
                for (p, c) in tree.bones() {
                    let len = (fk.positions.get(t, c) - fk.positions.get(t, p)).norm();
                    assert!((len - tree.offset(c).norm()).abs() < 1e-5);
                }
            }
            let head = fk.positions.get(0, HEAD);
            assert!(head.z > 1.3 && head.z < 1.8, "standing head height {}", head.z);
            let feet_down = (0..seq.n_frames()).filter(|&t| seq.contact(t, 10) || seq.contact(t, 11)).count();
            assert!(feet_down * 2 > seq.n_frames());
        }
    }
}

#[test]
fn sitting_touches_box_and_squatting_does_not() {
    let tree = KinematicTree::smpl_lite();
    let spec = SceneSpec::default();
    for seed in 0..4u64 {
        let (_, scene, sit) = generate_episode(seed, MotionKind::SitOnBox, &spec, &tree).unwrap();
        let boxes: Vec<_> = scene.props(PrimitiveKind::Box).cloned().collect();
        let fk = sit.motion().forward_kinematics(&tree).unwrap();
        let seated = (0..sit.n_frames()).any(|t| {
            let p = fk.positions.get(t, 0);
            boxes.iter().any(|b| b.surface_distance(&p) <= CONTACT_DISTANCE)
        });
        assert!(seated && (0..sit.n_frames()).any(|t| sit.contact(t, 0)));

        let (_, _, squat) = generate_episode(seed + 100, MotionKind::Squat, &spec, &tree).unwrap();
        assert!((0..squat.n_frames()).all(|t| !squat.contact(t, 0)));
    }
}

#[test]
fn reaching_touches_wall() {
    let tree = KinematicTree::smpl_lite();
    for seed in 0..4u64 {
        let (_, scene, seq) =
            generate_episode(seed, MotionKind::ReachWall, &SceneSpec::default(), &tree).unwrap();
        let walls: Vec<_> = scene.props(PrimitiveKind::Wall).cloned().collect();
        let fk = seq.motion().forward_kinematics(&tree).unwrap();
        let touch = (0..seq.n_frames()).any(|t| {
            [20, 21].iter().any(|&j| {
                let p: Vector3<f64> = fk.positions.get(t, j);
                walls.iter().any(|w| w.surface_distance(&p) <= CONTACT_DISTANCE)
            })
        });
        assert!(touch);
    }
}

#[test]
fn clouds_are_dense_and_masked() {
    let tree = KinematicTree::smpl_lite();
    let (_, scene, _) = generate_episode(5, MotionKind::Walk, &SceneSpec::default(), &tree).unwrap();
    let zg = scene.z_ground() as f32;
    for (p, &m) in scene.cloud.points().iter().zip(scene.cloud.ground_mask()) {
        assert_eq!(m, (p[2] - zg).abs() <= GROUND_BAND as f32);
    }
    // Floor sampling density, measured over a 1 m square of open floor.
    let boxes: Vec<_> = scene.props(PrimitiveKind::Box).chain(scene.props(PrimitiveKind::Wall)).cloned().collect();
    let mut best = 0;
    for cx in [-1.5f32, -0.5, 0.5, 1.5] {
        for cy in [-1.5f32, -0.5, 0.5, 1.5] {
            let blocked = boxes.iter().any(|b| {
                b.min[0] < (cx + 0.5) as f64 && b.max[0] > (cx - 0.5) as f64 && b.min[1] < (cy + 0.5) as f64 && b.max[1] > (cy - 0.5) as f64
            });
            if blocked {
                continue;
            }
            let n = scene
                .cloud
                .points()
                .iter()
                .filter(|p| (p[0] - cx).abs() <= 0.5 && (p[1] - cy).abs() <= 0.5)
                .count();
            best = best.max(n);
        }
    }
    assert!(best >= 500, "{best}");
}

#[test]
fn dataset_round_trip_is_bit_exact_and_splits_disjoint() {
    let tree = KinematicTree::smpl_lite();
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::default();
    let manifest = make_dataset(3, 2, 42, dir.path(), &spec, &tree).unwrap();
    assert_eq!(manifest.train_count, 3);
    assert_eq!(manifest.test_count, 2);
    let ds = Dataset::open(dir.path()).unwrap();
    let train = ds.load_split(Split::Train).unwrap();
    let test = ds.load_split(Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (3, 2));
    for a in &train {
        for b in &test {
            assert_ne!(a.seed, b.seed);
        }
    }
    let again = scenepose_core::synthdata::generate_split(3, 42, Split::Train, &spec, &tree).unwrap();
    for (loaded, fresh) in train.iter().zip(&again) {
        assert_eq!(loaded.sequence, fresh.sequence);
        assert_eq!(loaded.cloud, fresh.cloud);
    }
    assert_ne!(sequence_seed(42, Split::Train, 0), sequence_seed(43, Split::Train, 0));
}
