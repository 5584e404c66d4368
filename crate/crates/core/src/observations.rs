//! Sparse tracker streams and the extended observation stream.
//!
//! Channel layout of a sparse row (36 wide), per tracker in the order
//! head, left hand, right hand:
//!
//! | offset | width | content                        |
//! |--------|-------|--------------------------------|
//! | 0      | 3     | world position, m              |
//! | 3      | 6     | world rotation, 6D             |
//! | 9      | 3     | world linear velocity, m/s     |
//!
//! so the head occupies channels 0–11, the left hand 12–23 and the right
//! hand 24–35. The extended row (40 wide) appends the head height above
//! terrain (channel 36) and the head up vector (37–39).

use nalgebra::Vector3;
use thiserror::Error;

use crate::rotations::{matrix_to_rot6d, RotMatrix};
use crate::skeleton::{KinematicTree, MotionWindow, SkeletonError, HEAD, LEFT_WRIST, RIGHT_WRIST};
use crate::{EXT_OBS_DIM, OBS_DIM};

/// Joints carrying the three trackers, in channel order.
pub const TRACKER_JOINTS: [usize; 3] = [HEAD, LEFT_WRIST, RIGHT_WRIST];
pub const TRACKER_WIDTH: usize = 12;
pub const POSITION_OFFSET: usize = 0;
pub const ROTATION_OFFSET: usize = 3;
pub const VELOCITY_OFFSET: usize = 9;
pub const HEIGHT_CHANNEL: usize = 36;
pub const UP_CHANNELS: std::ops::Range<usize> = 37..40;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("need at least 2 frames to difference velocities, got {0}")]
    TooShort(usize),
    #[error("fps must be positive, got {0}")]
    BadFps(f64),
    #[error("frame count mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// Row-major `frames × width` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    width: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn new(width: usize, data: Vec<f64>) -> Self {
        assert!(width > 0 && data.len() % width == 0);
        Self { width, data }
    }

    pub fn zeros(frames: usize, width: usize) -> Self {
        Self::new(width, vec![0.0; frames * width])
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// `frames × 36` tracker stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseObservationWindow(pub Table);

/// `frames × 40` tracker stream plus head height and up vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedObservationWindow(pub Table);

impl SparseObservationWindow {
    pub fn n_frames(&self) -> usize {
        self.0.n_frames()
    }

    pub fn tracker_position(&self, t: usize, tracker: usize) -> Vector3<f64> {
        let o = tracker * TRACKER_WIDTH + POSITION_OFFSET;
        Vector3::from_column_slice(&self.0.row(t)[o..o + 3])
    }

    pub fn tracker_rot6d(&self, t: usize, tracker: usize) -> &[f64] {
        let o = tracker * TRACKER_WIDTH + ROTATION_OFFSET;
        &self.0.row(t)[o..o + 6]
    }

    pub fn tracker_velocity(&self, t: usize, tracker: usize) -> Vector3<f64> {
        let o = tracker * TRACKER_WIDTH + VELOCITY_OFFSET;
        Vector3::from_column_slice(&self.0.row(t)[o..o + 3])
    }

    pub fn head_positions(&self) -> Vec<Vector3<f64>> {
        (0..self.n_frames())
            .map(|t| self.tracker_position(t, 0))
            .collect()
    }
}

pub fn extract_sparse(
    motion: &MotionWindow,
    tree: &KinematicTree,
    fps: f64,
) -> Result<SparseObservationWindow, ObservationError> {
    if !(fps > 0.0) {
        return Err(ObservationError::BadFps(fps));
    }
    let frames = motion.n_frames();
    if frames < 2 {
        return Err(ObservationError::TooShort(frames));
    }
    let fk = motion.forward_kinematics(tree)?;
    let n = tree.len();
    let mut table = Table::zeros(frames, OBS_DIM);
    for t in 0..frames {
        let row = table.row_mut(t);
        for (k, &j) in TRACKER_JOINTS.iter().enumerate() {
            let base = k * TRACKER_WIDTH;
            let p = fk.positions.get(t, j);
            row[base..base + 3].copy_from_slice(p.as_slice());
            let r6 = matrix_to_rot6d(&fk.global_rotations[t * n + j])
                .expect("FK output is a rotation");
            row[base + ROTATION_OFFSET..base + ROTATION_OFFSET + 6].copy_from_slice(&r6.0);
            // Backward difference; frame 0 reuses frame 1's velocity.
            let (a, b) = if t == 0 { (0, 1) } else { (t - 1, t) };
            let v = (fk.positions.get(b, j) - fk.positions.get(a, j)) * fps;
            row[base + VELOCITY_OFFSET..base + VELOCITY_OFFSET + 3].copy_from_slice(v.as_slice());
        }
    }
    Ok(SparseObservationWindow(table))
}

/// World image of the head's local +Y axis.
pub fn head_up_vector(head_rotation: &RotMatrix) -> Vector3<f64> {
    head_rotation.column(1).into_owned()
}

pub fn relative_head_height(head_position: &Vector3<f64>, terrain_z: f64) -> f64 {
    head_position.z - terrain_z
}

pub fn build_extended(
    x: &SparseObservationWindow,
    h_per_frame: &[f64],
    up_per_frame: &[Vector3<f64>],
) -> Result<ExtendedObservationWindow, ObservationError> {
    let frames = x.n_frames();
    if h_per_frame.len() != frames || up_per_frame.len() != frames {
        return Err(ObservationError::Mismatch(format!(
            "observations have {frames} frames, heights {}, up vectors {}",
            h_per_frame.len(),
            up_per_frame.len()
        )));
    }
    let mut data = Vec::with_capacity(frames * EXT_OBS_DIM);
    for t in 0..frames {
        data.extend_from_slice(x.0.row(t));
        data.push(h_per_frame[t]);
        data.extend_from_slice(up_per_frame[t].as_slice());
    }
    Ok(ExtendedObservationWindow(Table::new(EXT_OBS_DIM, data)))
}

impl ExtendedObservationWindow {
    pub fn n_frames(&self) -> usize {
        self.0.n_frames()
    }

    pub fn sparse(&self) -> SparseObservationWindow {
        let data = (0..self.n_frames())
            .flat_map(|t| self.0.row(t)[..OBS_DIM].to_vec())
            .collect();
        SparseObservationWindow(Table::new(OBS_DIM, data))
    }

    pub fn head_height(&self, t: usize) -> f64 {
        self.0.row(t)[HEIGHT_CHANNEL]
    }

    pub fn up_vector(&self, t: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0.row(t)[UP_CHANNELS])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotations::{rot6d_to_matrix, rot_x, Rot6D};
    use crate::skeleton::{identity_pose, upright_root};

    fn standing(frames: usize, step: Vector3<f64>) -> MotionWindow {
        let mut pose = identity_pose(frames, 22);
        let root = matrix_to_rot6d(&upright_root(0.3)).unwrap();
        for t in 0..frames {
            pose[t * 132..t * 132 + 6].copy_from_slice(&root.0);
        }
        let trans = (0..frames)
            .map(|t| Vector3::new(0.0, 0.0, 0.92) + step * t as f64)
            .collect();
        MotionWindow::new(pose, trans)
    }

    #[test]
    fn stationary_pose_has_zero_velocity() {
        let tree = KinematicTree::smpl_lite();
        let obs = extract_sparse(&standing(5, Vector3::zeros()), &tree, 30.0).unwrap();
        for t in 0..5 {
            for k in 0..3 {
                assert_eq!(obs.tracker_velocity(t, k), Vector3::zeros());
            }
        }
    }

    #[test]
    fn translating_body_yields_tracker_velocity() {
        let tree = KinematicTree::smpl_lite();
        let obs = extract_sparse(&standing(4, Vector3::new(1.0 / 30.0, 0.0, 0.0)), &tree, 30.0)
            .unwrap();
        for t in 0..4 {
            let v = obs.tracker_velocity(t, 0);
            assert!((v - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-9, "{v:?}");
        }
    }

    #[test]
    fn layout_matches_fk() {
        let tree = KinematicTree::smpl_lite();
        let motion = standing(3, Vector3::new(0.01, 0.02, 0.0));
        let obs = extract_sparse(&motion, &tree, 30.0).unwrap();
        let fk = motion.forward_kinematics(&tree).unwrap();
        for (k, &j) in TRACKER_JOINTS.iter().enumerate() {
            assert_eq!(obs.tracker_position(2, k), fk.positions.get(2, j));
            let r = rot6d_to_matrix(&Rot6D::from_slice(obs.tracker_rot6d(2, k))).unwrap();
            assert!((r - fk.global_rotations[2 * 22 + j]).abs().max() < 1e-12);
            assert_eq!(&obs.0.row(2)[k * 12..k * 12 + 3], fk.positions.get(2, j).as_slice());
        }
        assert_eq!(obs.0.width(), 36);
    }

    #[test]
    fn single_frame_rejected() {
        let tree = KinematicTree::smpl_lite();
        assert!(matches!(
            extract_sparse(&standing(1, Vector3::zeros()), &tree, 30.0),
            Err(ObservationError::TooShort(1))
        ));
    }

    #[test]
    fn up_vector() {
        assert_eq!(head_up_vector(&RotMatrix::identity()), Vector3::new(0.0, 1.0, 0.0));
        let up = head_up_vector(&rot_x(std::f64::consts::FRAC_PI_2));
        assert!((up - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn head_height() {
        let p = Vector3::new(0.3, 0.1, 1.7);
        assert!((relative_head_height(&p, 0.0) - 1.7).abs() < 1e-15);
        assert!((relative_head_height(&p, 0.3) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn extended_concatenation() {
        let x = SparseObservationWindow(Table::zeros(2, 36));
        let ext = build_extended(&x, &[1.0, 1.0], &[Vector3::y(), Vector3::y()]).unwrap();
        assert_eq!(ext.0.width(), 40);
        let mut expected = vec![0.0; 36];
        expected.extend([1.0, 0.0, 1.0, 0.0]);
        assert_eq!(ext.0.row(1), &expected[..]);
        assert_eq!(ext.sparse(), x);
        assert!(build_extended(&x, &[1.0], &[Vector3::y(), Vector3::y()]).is_err());
    }
}
