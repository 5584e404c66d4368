//! Networks and differentiable objectives of the two-stage estimator.
//!
//! Stage I maps sparse tracker windows to a pose distribution; Stage II
//! refines a sampled pose against a cropped scene point cloud.

pub mod grouping;
pub mod kinematics;
pub mod nn;
pub mod objectives;
pub mod stage1;
pub mod stage2;
