//! Turns sequences into model-ready windows.
//!
//! Each window is expressed in a canonical frame: translated so the head sits
//! above the origin at the middle frame and rotated about the vertical so the
//! head faces the same way in every window. Heights are left untouched.

use nalgebra::{Matrix3, Vector3};

use scenepose_core::environment::{crop, remove_ground, spatial_salience_features, terrain_height, EnvironmentCloud};
use scenepose_core::observations::{
    extract_sparse, SparseObservationWindow, ROTATION_OFFSET, TRACKER_WIDTH, VELOCITY_OFFSET,
};
use scenepose_core::skeleton::{upright_root, JointPositions, KinematicTree};
use scenepose_core::synthdata::{add_tracker_noise, Episode, MotionKind, ScenePrimitive};
use scenepose_core::{NUM_JOINTS, OBS_DIM, POSE_DIM};
use scenepose_model::objectives::CollisionCrop;
use scenepose_model::stage1::history_window;

use crate::config::{DataConfig, Variant};
use crate::error::{PipelineError, Result};

/// A vertical-axis rigid transform `p ↦ Rz(−yaw)(p − origin)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canon {
    pub origin: [f64; 2],
    pub yaw: f64,
}

impl Canon {
    /// Frame from the head position and rotation of the reference frame.
    pub fn from_head(position: &Vector3<f64>, rotation: &Matrix3<f64>) -> Self {
        let f = rotation * Vector3::z();
        Self {
            origin: [position.x, position.y],
            yaw: f.x.atan2(-f.y),
        }
    }

    pub fn vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = (-self.yaw).sin_cos();
        Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    }

    pub fn point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.vector(&Vector3::new(p.x - self.origin[0], p.y - self.origin[1], p.z))
    }

    pub fn inverse_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    }

    pub fn inverse_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let w = self.inverse_vector(p);
        Vector3::new(w.x + self.origin[0], w.y + self.origin[1], w.z)
    }

    /// Rotates both columns of a 6D rotation block in place.
    pub fn rot6d(&self, block: &mut [f64]) {
        for col in 0..2 {
            let v = self.vector(&Vector3::new(block[3 * col], block[3 * col + 1], block[3 * col + 2]));
            block[3 * col..3 * col + 3].copy_from_slice(v.as_slice());
        }
    }

    pub fn inverse_rot6d(&self, block: &mut [f64]) {
        for col in 0..2 {
            let v = self.inverse_vector(&Vector3::new(block[3 * col], block[3 * col + 1], block[3 * col + 2]));
            block[3 * col..3 * col + 3].copy_from_slice(v.as_slice());
        }
    }

    /// Maps the sparse-observation row of one frame into the frame.
    pub fn obs_row(&self, row: &mut [f64]) {
        for k in 0..3 {
            let b = k * TRACKER_WIDTH;
            let p = self.point(&Vector3::new(row[b], row[b + 1], row[b + 2]));
            row[b..b + 3].copy_from_slice(p.as_slice());
            self.rot6d(&mut row[b + ROTATION_OFFSET..b + ROTATION_OFFSET + 6]);
            let v = self.vector(&Vector3::new(row[b + VELOCITY_OFFSET], row[b + VELOCITY_OFFSET + 1], row[b + VELOCITY_OFFSET + 2]));
            row[b + VELOCITY_OFFSET..b + VELOCITY_OFFSET + 3].copy_from_slice(v.as_slice());
        }
    }
}

fn decode6(block: &[f64]) -> Matrix3<f64> {
    let a = Vector3::new(block[0], block[1], block[2]).normalize();
    let b = Vector3::new(block[3], block[4], block[5]);
    let b = (b - a * a.dot(&b)).normalize();
    Matrix3::from_columns(&[a, b, a.cross(&b)])
}

/// Inputs of a sequence shared by all of its windows, in world coordinates.
#[derive(Debug, Clone)]
pub struct Stream {
    pub name: String,
    pub fps: f64,
    /// `frames × 36`.
    pub obs: Vec<f64>,
    pub cloud: EnvironmentCloud,
    pub cloud_no_ground: EnvironmentCloud,
    /// Head height above local terrain, per frame.
    pub heights: Vec<f64>,
}

impl Stream {
    pub fn new(name: String, fps: f64, obs: Vec<f64>, cloud: EnvironmentCloud) -> Result<Self> {
        if obs.is_empty() {
            return Err(PipelineError::Data(format!("{name}: empty observation stream")));
        }
        let mut s = Self::empty(name, fps, cloud);
        s.push_frames(&obs)?;
        Ok(s)
    }

    /// A stream with no frames yet.
    pub fn empty(name: String, fps: f64, cloud: EnvironmentCloud) -> Self {
        let cloud_no_ground = remove_ground(&cloud);
        Self {
            name,
            fps,
            obs: vec![],
            cloud,
            cloud_no_ground,
            heights: vec![],
        }
    }

    /// Appends whole frames of observations.
    pub fn push_frames(&mut self, obs: &[f64]) -> Result<()> {
        if obs.len() % OBS_DIM != 0 {
            return Err(PipelineError::Data(format!(
                "{}: observation length {} is not a multiple of {OBS_DIM}",
                self.name,
                obs.len()
            )));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Data(format!("{}: non-finite observation", self.name)));
        }
        for row in obs.chunks_exact(OBS_DIM) {
            self.heights.push(row[2] - terrain_height(&self.cloud, [row[0], row[1]], &[]));
        }
        self.obs.extend_from_slice(obs);
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.obs.len() / OBS_DIM
    }

    fn row(&self, t: usize) -> &[f64] {
        &self.obs[t * OBS_DIM..(t + 1) * OBS_DIM]
    }

    fn head(&self, t: usize) -> (Vector3<f64>, Matrix3<f64>) {
        let r = self.row(t);
        (Vector3::new(r[0], r[1], r[2]), decode6(&r[ROTATION_OFFSET..ROTATION_OFFSET + 6]))
    }
}

/// A stream with its ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub stream: Stream,
    pub kind: MotionKind,
    /// `frames × 132` local rotations.
    pub pose: Vec<f64>,
    pub positions: JointPositions,
    /// `frames × 22`.
    pub contacts: Vec<u8>,
    pub primitives: Vec<ScenePrimitive>,
}

impl Sequence {
    pub fn from_episode(ep: &Episode, tree: &KinematicTree, data: &DataConfig) -> Result<Self> {
        let motion = ep.sequence.motion();
        let mut sparse: SparseObservationWindow =
            extract_sparse(&motion, tree, ep.sequence.fps).map_err(|e| PipelineError::Data(format!("{}: {e}", ep.name)))?;
        if data.tracker_noise_pos > 0.0 || data.tracker_noise_rot > 0.0 {
            add_tracker_noise(&mut sparse, data.tracker_noise_pos, data.tracker_noise_rot, ep.seed ^ 0x6e6f_6973_65);
        }
        let fk = motion.forward_kinematics(tree).map_err(|e| PipelineError::Data(format!("{}: {e}", ep.name)))?;
        let stream = Stream::new(ep.name.clone(), ep.sequence.fps, sparse.0.into_vec(), ep.cloud.clone())?;
        Ok(Self {
            stream,
            kind: ep.sequence.kind,
            pose: motion.pose.clone(),
            positions: fk.positions,
            contacts: ep.sequence.contacts.clone(),
            primitives: ep.sequence.primitives.clone(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.stream.n_frames()
    }
}

/// Network inputs of one window, in its canonical frame.
#[derive(Debug, Clone)]
pub struct WindowInputs {
    pub start: usize,
    pub frames: usize,
    pub canon: Canon,
    /// `frames × 36`.
    pub obs: Vec<f64>,
    /// `frames × 40`.
    pub ext: Vec<f64>,
    /// `frames × 132`.
    pub history: Vec<f64>,
    /// Observed head position per frame, `frames × 3`.
    pub head: Vec<f64>,
    pub env: Vec<[f32; 3]>,
    pub salience: Vec<[f32; 4]>,
    pub collision: CollisionCrop,
    pub z_ground: f64,
}

/// Ground truth of one window, in the same canonical frame.
#[derive(Debug, Clone)]
pub struct WindowTargets {
    pub pose: Vec<f64>,
    /// `frames × 22 × 3`.
    pub positions: Vec<f64>,
    /// `frames × 22`, 0 or 1.
    pub contacts: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Window {
    pub sequence: String,
    pub inputs: WindowInputs,
    pub targets: Option<WindowTargets>,
}

/// Rest pose facing `yaw`: upright root, identity elsewhere.
pub fn rest_pose_row(yaw: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(POSE_DIM);
    let root = upright_root(yaw);
    row.extend_from_slice(&[root[(0, 0)], root[(1, 0)], root[(2, 0)], root[(0, 1)], root[(1, 1)], root[(2, 1)]]);
    for _ in 1..NUM_JOINTS {
        row.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
    row
}

pub struct WindowBuilder<'a> {
    pub data: &'a DataConfig,
    pub variant: &'a Variant,
    /// Crops are only drawn when the environment branch needs them.
    pub with_env: bool,
}

impl WindowBuilder<'_> {
    /// Window of `stream` starting at `start`. `history_source` holds world
    /// poses for at least every frame before `start` that the history reads.
    pub fn inputs(&self, stream: &Stream, start: usize, history_source: &[f64], crop_seed: u64) -> Result<WindowInputs> {
        let frames = self.data.window;
        if start + frames > stream.n_frames() {
            return Err(PipelineError::Data(format!(
                "{}: window [{start}, {}) exceeds {} frames",
                stream.name,
                start + frames,
                stream.n_frames()
            )));
        }
        let mid = start + frames / 2;
        let (head_mid, head_rot) = stream.head(mid);
        let canon = Canon::from_head(&head_mid, &head_rot);

        let mut obs = Vec::with_capacity(frames * OBS_DIM);
        let mut ext = Vec::with_capacity(frames * (OBS_DIM + 4));
        let mut head = Vec::with_capacity(frames * 3);
        for t in start..start + frames {
            let mut row = stream.row(t).to_vec();
            canon.obs_row(&mut row);
            let (_, r) = stream.head(t);
            let up = canon.vector(&r.column(1).into_owned());
            head.extend_from_slice(&row[0..3]);
            ext.extend_from_slice(&row);
            ext.push(stream.heights[t]);
            ext.extend_from_slice(up.as_slice());
            obs.extend_from_slice(&row);
        }

        let world_yaw = canon.yaw;
        let mut history = history_window(history_source, POSE_DIM, start, frames, self.data.history_shift, &rest_pose_row(world_yaw));
        for k in 0..frames {
            canon.rot6d(&mut history[k * POSE_DIM..k * POSE_DIM + 6]);
        }

        let (env, salience, collision) = if self.with_env {
            let n = self.variant.n_points;
            let center = [head_mid.x, head_mid.y];
            let to_canon = |p: &[f32; 3]| {
                let q = canon.point(&Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64));
                [q.x as f32, q.y as f32, q.z as f32]
            };
            let full = crop(&stream.cloud, self.variant.crop, center, self.data.crop_extent, n, crop_seed);
            let mut canon_crop = full.clone();
            canon_crop.points = full.points.iter().map(to_canon).collect();
            let sal = spatial_salience_features(&canon_crop, &Vector3::new(0.0, 0.0, head_mid.z)).features;
            let bare = if stream.cloud_no_ground.is_empty() {
                CollisionCrop { points: vec![], synthetic: true }
            } else {
                let c = crop(&stream.cloud_no_ground, self.variant.crop, center, self.data.crop_extent, n, crop_seed ^ 0x636f_6c6c);
                CollisionCrop {
                    points: c.points.iter().map(to_canon).collect(),
                    synthetic: c.synthetic,
                }
            };
            (canon_crop.points, sal, bare)
        } else {
            (vec![], vec![], CollisionCrop { points: vec![], synthetic: true })
        };

        Ok(WindowInputs {
            start,
            frames,
            canon,
            obs,
            ext,
            history,
            head,
            env,
            salience,
            collision,
            z_ground: stream.cloud.z_ground(),
        })
    }

    pub fn targets(&self, seq: &Sequence, inputs: &WindowInputs) -> WindowTargets {
        let canon = inputs.canon;
        let range = inputs.start..inputs.start + inputs.frames;
        let mut pose = seq.pose[range.start * POSE_DIM..range.end * POSE_DIM].to_vec();
        for k in 0..inputs.frames {
            canon.rot6d(&mut pose[k * POSE_DIM..k * POSE_DIM + 6]);
        }
        let mut positions = Vec::with_capacity(inputs.frames * NUM_JOINTS * 3);
        for t in range.clone() {
            for j in 0..NUM_JOINTS {
                positions.extend_from_slice(canon.point(&seq.positions.get(t, j)).as_slice());
            }
        }
        let contacts = seq.contacts[range.start * NUM_JOINTS..range.end * NUM_JOINTS].iter().map(|&c| c as f64).collect();
        WindowTargets { pose, positions, contacts }
    }

    /// Teacher-forced training window.
    pub fn training_window(&self, seq: &Sequence, start: usize, crop_seed: u64) -> Result<Window> {
        let inputs = self.inputs(&seq.stream, start, &seq.pose, crop_seed)?;
        let targets = self.targets(seq, &inputs);
        Ok(Window {
            sequence: seq.stream.name.clone(),
            inputs,
            targets: Some(targets),
        })
    }
}

/// Window starts covering `frames` at `stride`, with a final window flush
/// against the end.
pub fn training_starts(frames: usize, window: usize, stride: usize) -> Vec<usize> {
    if frames < window {
        return vec![];
    }
    let mut starts: Vec<usize> = (0..=frames - window).step_by(stride).collect();
    if *starts.last().unwrap() != frames - window {
        starts.push(frames - window);
    }
    starts
}

/// Non-overlapping inference windows; a trailing partial window is aligned
/// to the end of the stream and only its new frames are kept.
pub fn inference_starts(frames: usize, window: usize) -> Vec<usize> {
    if frames < window {
        return vec![];
    }
    let mut starts: Vec<usize> = (0..frames / window).map(|k| k * window).collect();
    if frames % window != 0 {
        starts.push(frames - window);
    }
    starts
}

/// Per-window crop seed.
pub fn crop_seed(seed: u64, sequence_index: usize, start: usize) -> u64 {
    scenepose_core::synthdata::sequence_seed(seed ^ (start as u64).wrapping_mul(0x9e37_79b9), scenepose_core::synthdata::Split::Train, sequence_index)
}
