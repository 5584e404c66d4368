//! Geometry and data layer for full-body motion estimation from three sparse
//! trackers (head, left hand, right hand) inside a scanned environment.
//!
//! Everything here is plain `f64`/`f32` numerics: 6D rotations, the 22-joint
//! kinematic tree with its capsule occupancy proxy, point-cloud cropping,
//! tracker-stream synthesis, evaluation metrics and the procedural
//! scene/motion generator used for training and testing.

pub mod environment;
pub mod metrics;
pub mod observations;
pub mod rotations;
pub mod skeleton;
pub mod synthdata;

/// Frames per training/inference window.
pub const WINDOW: usize = 40;
/// Joints in the body model.
pub const NUM_JOINTS: usize = 22;
/// Width of a flattened 6D pose row (22 × 6).
pub const POSE_DIM: usize = NUM_JOINTS * 6;
/// Width of a sparse observation row (3 trackers × 12).
pub const OBS_DIM: usize = 36;
/// Width of an extended observation row (36 + head height + up vector).
pub const EXT_OBS_DIM: usize = 40;
/// Points kept per environment crop.
pub const CROP_POINTS: usize = 1000;
/// Sample rate of every stream, in Hz.
pub const DEFAULT_FPS: f64 = 30.0;
