//! Kinematic tree, forward kinematics and the capsule body proxy.
//!
//! The default tree mirrors the SMPL 22-joint topology. Rest offsets are in
//! the parent frame using the SMPL body convention (x left, y up, z forward);
//! a standing body in the z-up world therefore carries a +90° rotation about
//! x in its root block.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rotations::{rot6d_to_matrix, Rot6D, RotMatrix, RotationError};

pub const HEAD: usize = 15;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;
pub const LEFT_ANKLE: usize = 7;
pub const RIGHT_ANKLE: usize = 8;
pub const LEFT_FOOT: usize = 10;
pub const RIGHT_FOOT: usize = 11;
/// Ankle and foot joints of both legs, the set the foot-ground losses act on.
pub const FEET: [usize; 4] = [LEFT_ANKLE, RIGHT_ANKLE, LEFT_FOOT, RIGHT_FOOT];
pub const HANDS: [usize; 2] = [LEFT_WRIST, RIGHT_WRIST];

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("invalid kinematic tree: {0}")]
    InvalidTree(String),
    #[error("pose has {got} values, expected a multiple of {per_frame}")]
    PoseShape { got: usize, per_frame: usize },
    #[error("pose has {pose} frames but translation has {translation}")]
    FrameMismatch { pose: usize, translation: usize },
    #[error("frame {frame}, joint {joint}: {source}")]
    Decode {
        frame: usize,
        joint: usize,
        #[source]
        source: RotationError,
    },
    #[error("skeleton config I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("skeleton config parse: {0}")]
    Parse(String),
}

/// One joint entry of the skeleton configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// Parent index, `-1` for the root.
    pub parent: i32,
    /// Bone vector from the parent joint in the parent frame, meters.
    pub offset: [f64; 3],
    /// Radius of the capsule on the bone ending at this joint, meters.
    /// Ignored for the root.
    #[serde(default)]
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub joints: Vec<JointSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vector3<f64>>,
    radii: Vec<f64>,
}

impl KinematicTree {
    pub fn from_config(config: &SkeletonConfig) -> Result<Self, SkeletonError> {
        let n = config.joints.len();
        if n == 0 {
            return Err(SkeletonError::InvalidTree("no joints".into()));
        }
        let mut names = Vec::with_capacity(n);
        let mut parents = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n);
        let mut radii = Vec::with_capacity(n);
        let mut roots = 0;
        for (j, spec) in config.joints.iter().enumerate() {
            let parent = match spec.parent {
                -1 => {
                    roots += 1;
                    if j != 0 {
                        return Err(SkeletonError::InvalidTree(format!(
                            "root must be joint 0, found root at {j}"
                        )));
                    }
                    None
                }
                p if p >= 0 && (p as usize) < j => Some(p as usize),
                p => {
                    return Err(SkeletonError::InvalidTree(format!(
                        "joint {j} ({}) has parent {p}; parents must precede children",
                        spec.name
                    )))
                }
            };
            if spec.offset.iter().any(|v| !v.is_finite()) {
                return Err(SkeletonError::InvalidTree(format!(
                    "joint {j} has a non-finite offset"
                )));
            }
            if parent.is_some() && !(spec.radius > 0.0 && spec.radius.is_finite()) {
                return Err(SkeletonError::InvalidTree(format!(
                    "joint {j} needs a positive capsule radius"
                )));
            }
            names.push(spec.name.clone());
            parents.push(parent);
            offsets.push(Vector3::from(spec.offset));
            radii.push(spec.radius);
        }
        if roots != 1 {
            return Err(SkeletonError::InvalidTree(format!(
                "expected exactly one root, found {roots}"
            )));
        }
        Ok(Self {
            names,
            parents,
            offsets,
            radii,
        })
    }

    pub fn to_config(&self) -> SkeletonConfig {
        SkeletonConfig {
            joints: (0..self.len())
                .map(|j| JointSpec {
                    name: self.names[j].clone(),
                    parent: self.parents[j].map_or(-1, |p| p as i32),
                    offset: [self.offsets[j].x, self.offsets[j].y, self.offsets[j].z],
                    radius: self.radii[j],
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, SkeletonError> {
        let config: SkeletonConfig =
            toml::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
        Self::from_config(&config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_config()).expect("skeleton config serializes")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// The default 22-joint body, roughly a 1.7 m adult.
    pub fn smpl_lite() -> Self {
        #[rustfmt::skip]
        let table: [(&str, i32, [f64; 3], f64); 22] = [
            ("pelvis",         -1, [0.0, 0.0, 0.0],     0.0),
            ("left_hip",        0, [0.08, -0.01, 0.0],  0.04),
            ("right_hip",       0, [-0.08, -0.01, 0.0], 0.04),
            ("spine1",          0, [0.0, 0.10, 0.0],    0.05),
            ("left_knee",       1, [0.0, -0.40, 0.0],   0.04),
            ("right_knee",      2, [0.0, -0.40, 0.0],   0.04),
            ("spine2",          3, [0.0, 0.13, 0.0],    0.07),
            ("left_ankle",      4, [0.0, -0.42, 0.0],   0.035),
            ("right_ankle",     5, [0.0, -0.42, 0.0],   0.035),
            ("spine3",          6, [0.0, 0.05, 0.0],    0.08),
            ("left_foot",       7, [0.0, -0.06, 0.12],  0.03),
            ("right_foot",      8, [0.0, -0.06, 0.12],  0.03),
            ("neck",            9, [0.0, 0.22, 0.0],    0.05),
            ("left_collar",     9, [0.07, 0.12, 0.0],   0.04),
            ("right_collar",    9, [-0.07, 0.12, 0.0],  0.04),
            ("head",           12, [0.0, 0.09, 0.03],   0.08),
            ("left_shoulder",  13, [0.11, 0.03, 0.0],   0.045),
            ("right_shoulder", 14, [-0.11, 0.03, 0.0],  0.045),
            ("left_elbow",     16, [0.26, 0.0, 0.0],    0.04),
            ("right_elbow",    17, [-0.26, 0.0, 0.0],   0.04),
            ("left_wrist",     18, [0.25, 0.0, 0.0],    0.03),
            ("right_wrist",    19, [-0.25, 0.0, 0.0],   0.03),
        ];
        let config = SkeletonConfig {
            joints: table
                .iter()
                .map(|(name, parent, offset, radius)| JointSpec {
                    name: name.to_string(),
                    parent: *parent,
                    offset: *offset,
                    radius: *radius,
                })
                .collect(),
        };
        Self::from_config(&config).expect("built-in skeleton is valid")
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn offset(&self, joint: usize) -> &Vector3<f64> {
        &self.offsets[joint]
    }

    pub fn name(&self, joint: usize) -> &str {
        &self.names[joint]
    }

    pub fn radius(&self, joint: usize) -> f64 {
        self.radii[joint]
    }

    /// Capsule radii of every bone, indexed by the bone's child joint.
    pub fn bone_radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Joints that have a parent; each one terminates a bone.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p, j)))
    }

    pub fn min_radius(&self) -> f64 {
        self.bones()
            .map(|(_, j)| self.radii[j])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Frame-major joint positions, `frames × joints`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions {
    n_joints: usize,
    data: Vec<Vector3<f64>>,
}

impl JointPositions {
    pub fn new(n_joints: usize, data: Vec<Vector3<f64>>) -> Self {
        assert!(n_joints > 0 && data.len() % n_joints == 0);
        Self { n_joints, data }
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.n_joints
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn frame(&self, t: usize) -> &[Vector3<f64>] {
        &self.data[t * self.n_joints..(t + 1) * self.n_joints]
    }

    pub fn get(&self, t: usize, j: usize) -> Vector3<f64> {
        self.data[t * self.n_joints + j]
    }

    pub fn as_slice(&self) -> &[Vector3<f64>] {
        &self.data
    }

    pub fn translated(&self, shift: &[Vector3<f64>]) -> Self {
        assert_eq!(shift.len(), self.n_frames());
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, p)| p + shift[i / self.n_joints])
            .collect();
        Self {
            n_joints: self.n_joints,
            data,
        }
    }
}

pub struct FkResult {
    pub positions: JointPositions,
    /// Frame-major global rotations, `frames × joints`.
    pub global_rotations: Vec<RotMatrix>,
}

/// Decodes a flattened `frames × joints × 6` pose into local rotation matrices.
pub fn decode_pose(pose: &[f64], n_joints: usize) -> Result<Vec<RotMatrix>, SkeletonError> {
    let per_frame = n_joints * 6;
    if pose.len() % per_frame != 0 {
        return Err(SkeletonError::PoseShape {
            got: pose.len(),
            per_frame,
        });
    }
    pose.chunks_exact(6)
        .enumerate()
        .map(|(i, block)| {
            rot6d_to_matrix(&Rot6D::from_slice(block)).map_err(|source| SkeletonError::Decode {
                frame: i / n_joints,
                joint: i % n_joints,
                source,
            })
        })
        .collect()
}

pub fn forward_kinematics(
    pose: &[f64],
    root_translation: &[Vector3<f64>],
    tree: &KinematicTree,
) -> Result<FkResult, SkeletonError> {
    let n = tree.len();
    let local = decode_pose(pose, n)?;
    let frames = local.len() / n;
    if frames != root_translation.len() {
        return Err(SkeletonError::FrameMismatch {
            pose: frames,
            translation: root_translation.len(),
        });
    }
    let mut positions = Vec::with_capacity(frames * n);
    let mut globals: Vec<RotMatrix> = Vec::with_capacity(frames * n);
    for t in 0..frames {
        let base = t * n;
        for j in 0..n {
            let r_local = local[base + j];
            match tree.parent(j) {
                None => {
                    globals.push(r_local);
                    positions.push(root_translation[t] + tree.offset(j));
                }
                Some(p) => {
                    let r_parent = globals[base + p];
                    globals.push(r_parent * r_local);
                    positions.push(positions[base + p] + r_parent * tree.offset(j));
                }
            }
        }
    }
    Ok(FkResult {
        positions: JointPositions::new(n, positions),
        global_rotations: globals,
    })
}

/// Identity-rotation pose for `frames` frames of an `n_joints` tree.
pub fn identity_pose(frames: usize, n_joints: usize) -> Vec<f64> {
    Rot6D::IDENTITY
        .0
        .iter()
        .copied()
        .cycle()
        .take(frames * n_joints * 6)
        .collect()
}

/// Root rotation of an upright body facing `yaw` (yaw 0 faces world −y).
pub fn upright_root(yaw: f64) -> Matrix3<f64> {
    crate::rotations::rot_z(yaw) * crate::rotations::rot_x(std::f64::consts::FRAC_PI_2)
}

/// A pose sequence with its root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionWindow {
    /// Flattened `frames × joints × 6` local rotations.
    pub pose: Vec<f64>,
    pub root_translation: Vec<Vector3<f64>>,
}

impl MotionWindow {
    pub fn new(pose: Vec<f64>, root_translation: Vec<Vector3<f64>>) -> Self {
        Self {
            pose,
            root_translation,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.root_translation.len()
    }

    pub fn frame_pose(&self, t: usize, n_joints: usize) -> &[f64] {
        &self.pose[t * n_joints * 6..(t + 1) * n_joints * 6]
    }

    pub fn slice(&self, start: usize, end: usize, n_joints: usize) -> Self {
        Self {
            pose: self.pose[start * n_joints * 6..end * n_joints * 6].to_vec(),
            root_translation: self.root_translation[start..end].to_vec(),
        }
    }

    pub fn forward_kinematics(&self, tree: &KinematicTree) -> Result<FkResult, SkeletonError> {
        forward_kinematics(&self.pose, &self.root_translation, tree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn distance_to_axis(&self, p: &Vector3<f64>) -> f64 {
        point_segment_distance(p, &self.a, &self.b)
    }

    /// Normalized occupancy `(r − d)/r`: positive strictly inside.
    pub fn occupancy(&self, p: &Vector3<f64>) -> f64 {
        (self.radius - self.distance_to_axis(p)) / self.radius
    }
}

/// Closest-point parameter of `p` on segment `a→b`, in `[0, 1]`.
pub fn segment_parameter(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    }
}

pub fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let s = segment_parameter(p, a, b);
    (p - (a + (b - a) * s)).norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyCapsuleSet {
    pub capsules: Vec<Capsule>,
    /// Child joint of each capsule's bone.
    pub bone_joint: Vec<usize>,
}

/// One capsule per bone of `tree` for a single frame of joint positions.
/// `shape_radii` is indexed by the child joint of each bone.
pub fn body_capsules(
    frame_positions: &[Vector3<f64>],
    tree: &KinematicTree,
    shape_radii: &[f64],
) -> BodyCapsuleSet {
    let mut capsules = Vec::with_capacity(tree.len().saturating_sub(1));
    let mut bone_joint = Vec::with_capacity(capsules.capacity());
    for (p, j) in tree.bones() {
        capsules.push(Capsule {
            a: frame_positions[p],
            b: frame_positions[j],
            radius: shape_radii[j],
        });
        bone_joint.push(j);
    }
    BodyCapsuleSet {
        capsules,
        bone_joint,
    }
}

impl BodyCapsuleSet {
    pub fn max_radius(&self) -> f64 {
        self.capsules.iter().map(|c| c.radius).fold(0.0, f64::max)
    }

    /// Occupancy and the index of the capsule attaining it.
    pub fn occupancy_argmax(&self, point: &Vector3<f64>) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, c) in self.capsules.iter().enumerate() {
            let f = c.occupancy(point);
            if f > best.0 {
                best = (f, i);
            }
        }
        best
    }
}

/// `max_k (r_k − dist(point, segment_k)) / r_k`; positive iff `point` is
/// strictly inside some capsule.
pub fn occupancy(capsules: &BodyCapsuleSet, point: &Vector3<f64>) -> f64 {
    capsules.occupancy_argmax(point).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotations::{matrix_to_rot6d, rot_z};

    fn chain(offsets: &[[f64; 3]]) -> KinematicTree {
        let joints = offsets
            .iter()
            .enumerate()
            .map(|(j, o)| JointSpec {
                name: format!("j{j}"),
                parent: j as i32 - 1,
                offset: *o,
                radius: 0.05,
            })
            .collect();
        KinematicTree::from_config(&SkeletonConfig { joints }).unwrap()
    }

    #[test]
    fn default_tree_is_smpl_shaped() {
        let tree = KinematicTree::smpl_lite();
        assert_eq!(tree.len(), 22);
        assert_eq!(tree.bones().count(), 21);
        assert_eq!(tree.name(HEAD), "head");
        assert_eq!(tree.name(LEFT_WRIST), "left_wrist");
        assert_eq!(tree.name(RIGHT_FOOT), "right_foot");
        assert_eq!(tree.parent(0), None);
    }

    #[test]
    fn tree_validation() {
        let mut config = KinematicTree::smpl_lite().to_config();
        config.joints[5].parent = 7;
        assert!(KinematicTree::from_config(&config).is_err());
        let mut config = KinematicTree::smpl_lite().to_config();
        config.joints[3].parent = -1;
        assert!(KinematicTree::from_config(&config).is_err());
        let mut config = KinematicTree::smpl_lite().to_config();
        config.joints[3].radius = 0.0;
        assert!(KinematicTree::from_config(&config).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let tree = KinematicTree::smpl_lite();
        let back = KinematicTree::from_toml(&tree.to_toml()).unwrap();
        assert_eq!(tree, back);
        assert_eq!(tree.config_hash(), back.config_hash());
    }

    #[test]
    fn identity_pose_places_cumulative_offsets() {
        let tree = KinematicTree::smpl_lite();
        let pose = identity_pose(1, 22);
        let fk = forward_kinematics(&pose, &[Vector3::zeros()], &tree).unwrap();
        for j in 0..22 {
            let mut expected = Vector3::zeros();
            let mut k = Some(j);
            while let Some(i) = k {
                expected += tree.offset(i);
                k = tree.parent(i);
            }
            assert!((fk.positions.get(0, j) - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn two_bone_chain_quarter_turn() {
        let tree = chain(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let mut pose = identity_pose(1, 3);
        pose[..6].copy_from_slice(&matrix_to_rot6d(&rot_z(std::f64::consts::FRAC_PI_2)).unwrap().0);
        let fk = forward_kinematics(&pose, &[Vector3::zeros()], &tree).unwrap();
        assert!((fk.positions.get(0, 1) - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((fk.positions.get(0, 2) - Vector3::new(-2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn frame_mismatch_is_an_error() {
        let tree = KinematicTree::smpl_lite();
        let pose = identity_pose(2, 22);
        assert!(matches!(
            forward_kinematics(&pose, &[Vector3::zeros()], &tree),
            Err(SkeletonError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn capsules_and_occupancy() {
        let tree = KinematicTree::smpl_lite();
        let fk = forward_kinematics(&identity_pose(1, 22), &[Vector3::zeros()], &tree).unwrap();
        let caps = body_capsules(fk.positions.frame(0), &tree, tree.bone_radii());
        assert_eq!(caps.capsules.len(), 21);
        for (c, &j) in caps.capsules.iter().zip(&caps.bone_joint) {
            let p = tree.parent(j).unwrap();
            assert!((c.b - c.a - tree.offset(j)).norm() < 1e-12);
            assert_eq!(c.a, fk.positions.get(0, p));
        }
        // On a joint center: occupancy 1 for the capsule ending there.
        let wrist = fk.positions.get(0, LEFT_WRIST);
        assert!((occupancy(&caps, &wrist) - 1.0).abs() < 1e-12);
        // Far away: negative.
        assert!(occupancy(&caps, &Vector3::new(10.0, 10.0, 10.0)) < 0.0);
        // On the surface of the wrist sphere cap, beyond the bone end.
        let surface = wrist + Vector3::new(0.03, 0.0, 0.0);
        assert!(occupancy(&caps, &surface).abs() < 1e-12);
    }

    #[test]
    fn zero_length_bone_is_a_sphere() {
        let c = Capsule {
            a: Vector3::new(1.0, 0.0, 0.0),
            b: Vector3::new(1.0, 0.0, 0.0),
            radius: 0.5,
        };
        assert!((c.occupancy(&Vector3::new(1.25, 0.0, 0.0)) - 0.5).abs() < 1e-12);
    }
}
