//! Evaluation metrics: rotational, positional, velocity error and jitter.
//!
//! Units follow the usual reporting convention: degrees, millimeters,
//! millimeters per second, and jerk in units of 10² m/s³.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotations::geodesic_angle;
use crate::skeleton::{decode_pose, JointPositions, SkeletonError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

fn check_same(pred: &JointPositions, gt: &JointPositions) -> Result<(), MetricsError> {
    if pred.n_frames() != gt.n_frames() || pred.n_joints() != gt.n_joints() {
        return Err(MetricsError::Shape(format!(
            "{}×{} vs {}×{}",
            pred.n_frames(),
            pred.n_joints(),
            gt.n_frames(),
            gt.n_joints()
        )));
    }
    Ok(())
}

/// Running sums behind each metric, so sequences can be streamed in.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Sum {
    total: f64,
    count: usize,
}

impl Sum {
    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total / self.count as f64
        }
    }

    fn merge(&mut self, other: Sum) {
        self.total += other.total;
        self.count += other.count;
    }
}

fn rot_sum(pred_pose: &[f64], gt_pose: &[f64], n_joints: usize) -> Result<Sum, MetricsError> {
    if pred_pose.len() != gt_pose.len() {
        return Err(MetricsError::Shape(format!(
            "pose lengths {} vs {}",
            pred_pose.len(),
            gt_pose.len()
        )));
    }
    let a = decode_pose(pred_pose, n_joints)?;
    let b = decode_pose(gt_pose, n_joints)?;
    let total = a
        .iter()
        .zip(&b)
        .map(|(x, y)| geodesic_angle(x, y).to_degrees())
        .sum();
    Ok(Sum {
        total,
        count: a.len(),
    })
}

fn pos_sum(pred: &JointPositions, gt: &JointPositions) -> Result<Sum, MetricsError> {
    check_same(pred, gt)?;
    let total = pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(p, g)| (p - g).norm() * 1000.0)
        .sum();
    Ok(Sum {
        total,
        count: pred.as_slice().len(),
    })
}

fn backward_velocity(p: &JointPositions, t: usize, j: usize, fps: f64) -> Vector3<f64> {
    (p.get(t, j) - p.get(t - 1, j)) * fps
}

fn vel_sum(pred: &JointPositions, gt: &JointPositions, fps: f64) -> Result<Sum, MetricsError> {
    check_same(pred, gt)?;
    let frames = pred.n_frames();
    if frames < 2 {
        return Err(MetricsError::TooShort { needed: 2, got: frames });
    }
    let mut total = 0.0;
    for t in 1..frames {
        for j in 0..pred.n_joints() {
            let dv = backward_velocity(pred, t, j, fps) - backward_velocity(gt, t, j, fps);
            total += dv.norm() * 1000.0;
        }
    }
    Ok(Sum {
        total,
        count: (frames - 1) * pred.n_joints(),
    })
}

fn jerk_sum(pred: &JointPositions, fps: f64) -> Result<Sum, MetricsError> {
    let frames = pred.n_frames();
    if frames < 4 {
        return Err(MetricsError::TooShort { needed: 4, got: frames });
    }
    let mut total = 0.0;
    let scale = fps.powi(3) / 100.0;
    for t in 3..frames {
        for j in 0..pred.n_joints() {
            let d3 = pred.get(t, j) - pred.get(t - 1, j) * 3.0 + pred.get(t - 2, j) * 3.0
                - pred.get(t - 3, j);
            total += d3.norm() * scale;
        }
    }
    Ok(Sum {
        total,
        count: (frames - 3) * pred.n_joints(),
    })
}

/// Mean geodesic error of local joint rotations, degrees.
pub fn mpjre(pred_pose: &[f64], gt_pose: &[f64], n_joints: usize) -> Result<f64, MetricsError> {
    Ok(rot_sum(pred_pose, gt_pose, n_joints)?.mean())
}

/// Mean per-joint position error, millimeters.
pub fn mpjpe(pred: &JointPositions, gt: &JointPositions) -> Result<f64, MetricsError> {
    Ok(pos_sum(pred, gt)?.mean())
}

/// Mean per-joint velocity error from backward differences, mm/s.
pub fn mpjve(pred: &JointPositions, gt: &JointPositions, fps: f64) -> Result<f64, MetricsError> {
    Ok(vel_sum(pred, gt, fps)?.mean())
}

/// Mean jerk magnitude from third backward differences, 10² m/s³.
pub fn jitter(pred: &JointPositions, fps: f64) -> Result<f64, MetricsError> {
    Ok(jerk_sum(pred, fps)?.mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjre_deg: f64,
    pub mpjpe_mm: f64,
    pub mpjve_mm_s: f64,
    pub jitter_e2_m_s3: f64,
    pub frames: usize,
    pub sequences: usize,
}

impl MetricsReport {
    /// `key = value` lines in a fixed key order.
    pub fn to_key_value(&self) -> String {
        format!(
            "mpjre_deg = {}\nmpjpe_mm = {}\nmpjve_mm_s = {}\njitter_e2_m_s3 = {}\nframes = {}\nsequences = {}\n",
            self.mpjre_deg, self.mpjpe_mm, self.mpjve_mm_s, self.jitter_e2_m_s3, self.frames, self.sequences
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Streams sequences into the four metrics; the result does not depend on
/// how sequences are grouped into `add_sequence` calls or accumulators.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    rot: Sum,
    pos: Sum,
    vel: Sum,
    jerk: Sum,
    frames: usize,
    sequences: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sequence(
        &mut self,
        pred_pose: &[f64],
        gt_pose: &[f64],
        pred_positions: &JointPositions,
        gt_positions: &JointPositions,
        fps: f64,
    ) -> Result<(), MetricsError> {
        let n_joints = pred_positions.n_joints();
        let rot = rot_sum(pred_pose, gt_pose, n_joints)?;
        let pos = pos_sum(pred_positions, gt_positions)?;
        let vel = vel_sum(pred_positions, gt_positions, fps)?;
        let jerk = jerk_sum(pred_positions, fps)?;
        self.rot.merge(rot);
        self.pos.merge(pos);
        self.vel.merge(vel);
        self.jerk.merge(jerk);
        self.frames += pred_positions.n_frames();
        self.sequences += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.rot.merge(other.rot);
        self.pos.merge(other.pos);
        self.vel.merge(other.vel);
        self.jerk.merge(other.jerk);
        self.frames += other.frames;
        self.sequences += other.sequences;
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            mpjre_deg: self.rot.mean(),
            mpjpe_mm: self.pos.mean(),
            mpjve_mm_s: self.vel.mean(),
            jitter_e2_m_s3: self.jerk.mean(),
            frames: self.frames,
            sequences: self.sequences,
        }
    }
}
