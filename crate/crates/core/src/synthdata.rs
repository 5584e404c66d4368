//! Procedural scenes and kinematic motions with ground-truth poses, contact
//! labels and surface-sampled point clouds.
//!
//! Scenes are axis-aligned: one floor rectangle, boxes resting on it and
//! thin walls along its edges. Motions are keyframed body targets (pelvis,
//! heading, spine lean, arm angles, ankle positions) eased between keys and
//! turned into joint rotations by a closed-form two-link leg solver, so feet
//! stay planted exactly where the script puts them.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{EnvironmentCloud, EnvironmentError, Point};
use crate::observations::{SparseObservationWindow, TRACKER_WIDTH, ROTATION_OFFSET};
use crate::rotations::{matrix_to_rot6d, rot6d_to_matrix, rot_x, rot_y, rot_z, Rot6D};
use crate::skeleton::{
    body_capsules, forward_kinematics, upright_root, BodyCapsuleSet, Capsule, JointPositions,
    KinematicTree, MotionWindow, SkeletonError,
};
use crate::{DEFAULT_FPS, NUM_JOINTS, POSE_DIM, WINDOW};

/// Joint-to-surface distance that counts as contact (τ_c), meters.
pub const CONTACT_DISTANCE: f64 = 0.05;
/// Largest tolerated capsule penetration into the scene, meters.
pub const MAX_PENETRATION: f64 = 0.01;
/// Minimum surface sampling density, points per square meter.
pub const SURFACE_DENSITY: f64 = 500.0;

const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene placement infeasible after {0} attempts")]
    Infeasible(usize),
    #[error("scene lacks the prop required for {0:?}")]
    MissingProp(MotionKind),
    #[error("generated motion penetrates the scene by {0:.4} m")]
    Penetration(f64),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error("dataset I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Floor,
    Box,
    Wall,
}

/// Axis-aligned primitive. A floor is a zero-thickness rectangle at `z_ground`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub kind: PrimitiveKind,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ScenePrimitive {
    fn center(&self) -> Vector3<f64> {
        (Vector3::from(self.min) + Vector3::from(self.max)) * 0.5
    }

    fn half(&self) -> Vector3<f64> {
        (Vector3::from(self.max) - Vector3::from(self.min)) * 0.5
    }

    /// Signed distance to the solid, negative inside. A floor has no inside.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = (p - self.center()).abs() - self.half();
        let outside = q.map(|v| v.max(0.0)).norm();
        let inside = q.max().min(0.0);
        outside + inside
    }

    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.signed_distance(p).abs()
    }

    pub fn top(&self) -> f64 {
        self.max[2]
    }

    fn footprint_contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    fn footprint_overlaps(&self, other: &ScenePrimitive, margin: f64) -> bool {
        self.min[0] - margin < other.max[0]
            && other.min[0] - margin < self.max[0]
            && self.min[1] - margin < other.max[1]
            && other.min[1] - margin < self.max[1]
    }

    /// Uniform samples over the exposed faces. Faces lying on the floor are
    /// skipped; floor samples under other primitives' footprints are dropped.
    fn sample_surface(
        &self,
        density: f64,
        z_ground: f64,
        occluders: &[ScenePrimitive],
        rng: &mut ChaCha8Rng,
    ) -> Vec<Point> {
        let (lo, hi) = (Vector3::from(self.min), Vector3::from(self.max));
        let size = hi - lo;
        // (fixed axis, fixed value, two free axes)
        let mut faces: Vec<(usize, f64, usize, usize)> = vec![(2, hi.z, 0, 1)];
        if self.kind != PrimitiveKind::Floor {
            if lo.z > z_ground + 1e-9 {
                faces.push((2, lo.z, 0, 1));
            }
            faces.extend([(0, lo.x, 1, 2), (0, hi.x, 1, 2), (1, lo.y, 0, 2), (1, hi.y, 0, 2)]);
        }
        let mut out = Vec::new();
        for (axis, value, u, v) in faces {
            let area = size[u] * size[v];
            let count = (area * density).ceil() as usize;
            for _ in 0..count {
                let mut p = Vector3::zeros();
                p[axis] = value;
                p[u] = rng.gen_range(lo[u]..=hi[u]);
                p[v] = rng.gen_range(lo[v]..=hi[v]);
                if self.kind == PrimitiveKind::Floor
                    && occluders.iter().any(|o| o.footprint_contains(p.x, p.y))
                {
                    continue;
                }
                out.push([p.x as f32, p.y as f32, p.z as f32]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub z_ground: f64,
    /// Half side of the square floor, meters.
    pub floor_half_size: f64,
    pub boxes: (usize, usize),
    pub box_footprint: (f64, f64),
    pub box_height: (f64, f64),
    pub walls: (usize, usize),
    pub wall_length: (f64, f64),
    pub wall_height: f64,
    pub wall_thickness: f64,
    pub density: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            z_ground: 0.0,
            floor_half_size: 2.5,
            boxes: (1, 2),
            box_footprint: (0.42, 0.6),
            box_height: (0.33, 0.45),
            walls: (1, 1),
            wall_length: (2.0, 3.0),
            wall_height: 2.0,
            wall_thickness: 0.1,
            density: SURFACE_DENSITY,
            max_attempts: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    pub cloud: EnvironmentCloud,
}

impl Scene {
    pub fn z_ground(&self) -> f64 {
        self.cloud.z_ground()
    }

    pub fn props(&self, kind: PrimitiveKind) -> impl Iterator<Item = &ScenePrimitive> {
        self.primitives.iter().filter(move |p| p.kind == kind)
    }
}

pub fn sample_cloud(primitives: &[ScenePrimitive], z_ground: f64, density: f64, seed: u64) -> Result<EnvironmentCloud, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c10d);
    let occluders: Vec<ScenePrimitive> = primitives
        .iter()
        .filter(|p| p.kind != PrimitiveKind::Floor)
        .cloned()
        .collect();
    let points: Vec<Point> = primitives
        .iter()
        .flat_map(|p| p.sample_surface(density, z_ground, &occluders, &mut rng))
        .collect();
    Ok(EnvironmentCloud::with_inferred_ground(points, z_ground)?)
}

pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zg = spec.z_ground;
    let h = spec.floor_half_size;
    for _ in 0..spec.max_attempts {
        let mut prims = vec![ScenePrimitive {
            kind: PrimitiveKind::Floor,
            min: [-h, -h, zg],
            max: [h, h, zg],
        }];
        let n_walls = rng.gen_range(spec.walls.0..=spec.walls.1);
        let mut ok = true;
        for _ in 0..n_walls {
            let len = rng.gen_range(spec.wall_length.0..=spec.wall_length.1);
            let along = rng.gen_range(-(h - len / 2.0 - 0.1)..=(h - len / 2.0 - 0.1));
            let t = spec.wall_thickness;
            let inner = h - 0.2;
            let (min, max) = match rng.gen_range(0..4) {
                0 => ([inner, along - len / 2.0, zg], [inner + t, along + len / 2.0, zg + spec.wall_height]),
                1 => ([-inner - t, along - len / 2.0, zg], [-inner, along + len / 2.0, zg + spec.wall_height]),
                2 => ([along - len / 2.0, inner, zg], [along + len / 2.0, inner + t, zg + spec.wall_height]),
                _ => ([along - len / 2.0, -inner - t, zg], [along + len / 2.0, -inner, zg + spec.wall_height]),
            };
            let wall = ScenePrimitive { kind: PrimitiveKind::Wall, min, max };
            if prims.iter().skip(1).any(|p| p.footprint_overlaps(&wall, 0.3)) {
                ok = false;
                break;
            }
            prims.push(wall);
        }
        if !ok {
            continue;
        }
        let n_boxes = rng.gen_range(spec.boxes.0..=spec.boxes.1);
        for _ in 0..n_boxes {
            let sx = rng.gen_range(spec.box_footprint.0..=spec.box_footprint.1);
            let sy = rng.gen_range(spec.box_footprint.0..=spec.box_footprint.1);
            let sz = rng.gen_range(spec.box_height.0..=spec.box_height.1);
            let lim = h - 0.9;
            let cx = rng.gen_range(-lim..=lim);
            let cy = rng.gen_range(-lim..=lim);
            let b = ScenePrimitive {
                kind: PrimitiveKind::Box,
                min: [cx - sx / 2.0, cy - sy / 2.0, zg],
                max: [cx + sx / 2.0, cy + sy / 2.0, zg + sz],
            };
            // Leave a walkway between props.
            if prims.iter().skip(1).any(|p| p.footprint_overlaps(&b, 1.3)) {
                ok = false;
                break;
            }
            prims.push(b);
        }
        if !ok {
            continue;
        }
        let cloud = sample_cloud(&prims, zg, spec.density, seed)?;
        return Ok(Scene {
            primitives: prims,
            cloud,
        });
    }
    Err(SynthError::Infeasible(spec.max_attempts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Walk,
    Squat,
    SitOnBox,
    ReachWall,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [
        MotionKind::Walk,
        MotionKind::Squat,
        MotionKind::SitOnBox,
        MotionKind::ReachWall,
    ];
}

/// A generated sequence as it is stored on disk: `f32` pose and translation,
/// binary contacts.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub kind: MotionKind,
    pub fps: f64,
    /// `frames × 132` local 6D rotations.
    pub pose: Vec<f32>,
    pub translation: Vec<[f32; 3]>,
    /// `frames × 22`, 0 or 1.
    pub contacts: Vec<u8>,
    pub primitives: Vec<ScenePrimitive>,
}

impl LabeledSequence {
    pub fn n_frames(&self) -> usize {
        self.translation.len()
    }

    pub fn motion(&self) -> MotionWindow {
        MotionWindow::new(
            self.pose.iter().map(|&v| v as f64).collect(),
            self.translation
                .iter()
                .map(|t| Vector3::new(t[0] as f64, t[1] as f64, t[2] as f64))
                .collect(),
        )
    }

    pub fn contact(&self, t: usize, j: usize) -> bool {
        self.contacts[t * NUM_JOINTS + j] != 0
    }
}

/// `contact[t][j] = 1` iff the joint is within `tau` of some primitive surface.
pub fn label_contacts(positions: &JointPositions, primitives: &[ScenePrimitive], tau: f64) -> Vec<u8> {
    positions
        .as_slice()
        .iter()
        .map(|p| {
            primitives
                .iter()
                .any(|prim| prim.surface_distance(p) <= tau) as u8
        })
        .collect()
}

/// Deepest capsule intrusion into `prim`, meters (0 when separated).
pub fn capsule_penetration(capsule: &Capsule, prim: &ScenePrimitive) -> f64 {
    if prim.kind == PrimitiveKind::Floor {
        let low = capsule.a.z.min(capsule.b.z) - capsule.radius;
        return (prim.max[2] - low).max(0.0);
    }
    // The signed distance of a convex solid is convex along a segment.
    let f = |s: f64| prim.signed_distance(&(capsule.a + (capsule.b - capsule.a) * s));
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let best = f(0.5 * (lo + hi)).min(f(0.0)).min(f(1.0));
    (capsule.radius - best).max(0.0)
}

/// Deepest intrusion of any capsule into any primitive (floor optional).
pub fn penetration_depth(capsules: &BodyCapsuleSet, primitives: &[ScenePrimitive], include_floor: bool) -> f64 {
    let mut worst = 0.0f64;
    for prim in primitives {
        if prim.kind == PrimitiveKind::Floor && !include_floor {
            continue;
        }
        for c in &capsules.capsules {
            worst = worst.max(capsule_penetration(c, prim));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Body targets and the pose solver

#[derive(Debug, Clone, Copy, PartialEq)]
struct Arm {
    /// Forward raise from hanging, rad.
    flex: f64,
    /// Sideways raise from hanging, rad.
    abduct: f64,
    elbow: f64,
}

impl Arm {
    fn hanging() -> Self {
        Arm {
            flex: 0.05,
            abduct: 0.12,
            elbow: 0.15,
        }
    }

    fn lerp(&self, o: &Arm, s: f64) -> Arm {
        Arm {
            flex: lerp(self.flex, o.flex, s),
            abduct: lerp(self.abduct, o.abduct, s),
            elbow: lerp(self.elbow, o.elbow, s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Targets {
    pelvis: Vector3<f64>,
    yaw: f64,
    lean: f64,
    neck_pitch: f64,
    neck_yaw: f64,
    arms: [Arm; 2],
    ankles: [Vector3<f64>; 2],
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

fn ease(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

impl Targets {
    fn lerp(&self, o: &Targets, s: f64) -> Targets {
        Targets {
            pelvis: self.pelvis.lerp(&o.pelvis, s),
            yaw: lerp(self.yaw, o.yaw, s),
            lean: lerp(self.lean, o.lean, s),
            neck_pitch: lerp(self.neck_pitch, o.neck_pitch, s),
            neck_yaw: lerp(self.neck_yaw, o.neck_yaw, s),
            arms: [self.arms[0].lerp(&o.arms[0], s), self.arms[1].lerp(&o.arms[1], s)],
            ankles: [
                self.ankles[0].lerp(&o.ankles[0], s),
                self.ankles[1].lerp(&o.ankles[1], s),
            ],
        }
    }
}

fn forward(yaw: f64) -> Vector3<f64> {
    Vector3::new(yaw.sin(), -yaw.cos(), 0.0)
}

fn left(yaw: f64) -> Vector3<f64> {
    Vector3::new(yaw.cos(), yaw.sin(), 0.0)
}

struct LegGeometry {
    hip: [Vector3<f64>; 2],
    thigh: f64,
    shin: f64,
}

impl LegGeometry {
    fn new(tree: &KinematicTree) -> Self {
        Self {
            hip: [*tree.offset(1), *tree.offset(2)],
            thigh: tree.offset(4).norm(),
            shin: tree.offset(7).norm(),
        }
    }

    fn reach(&self) -> f64 {
        self.thigh + self.shin
    }

    /// Ankle height above the floor when the foot is flat on it.
    fn ankle_clearance(tree: &KinematicTree) -> f64 {
        -tree.offset(10).y + tree.radius(10)
    }
}

/// Closed-form leg solve: hip local rotation, knee local rotation, ankle
/// local rotation (keeping the foot aligned with the pelvis heading).
fn solve_leg(
    pelvis_rot: &Matrix3<f64>,
    hip_world: &Vector3<f64>,
    ankle_world: &Vector3<f64>,
    geo: &LegGeometry,
) -> [Matrix3<f64>; 3] {
    let d = pelvis_rot.transpose() * (ankle_world - hip_world);
    let phi = d.x.atan2(-d.y);
    let dp = rot_z(phi).transpose() * d;
    let (l1, l2) = (geo.thigh, geo.shin);
    let dist = (dp.y * dp.y + dp.z * dp.z)
        .sqrt()
        .clamp((l1 - l2).abs() + 1e-3, l1 + l2 - 1e-6);
    let cos_k = ((dist * dist - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let k = cos_k.acos();
    let beta = dp.z.atan2(-dp.y);
    let a = beta + (l2 * k.sin()).atan2(l1 + l2 * k.cos());
    let hip = rot_z(phi) * rot_x(-a);
    let knee = rot_x(k);
    let ankle = (hip * knee).transpose();
    [hip, knee, ankle]
}

fn solve_pose(t: &Targets, geo: &LegGeometry) -> (Vec<f64>, Vector3<f64>) {
    let mut local = vec![Matrix3::identity(); NUM_JOINTS];
    let root = upright_root(t.yaw);
    local[0] = root;
    for (side, (hip_j, knee_j, ankle_j)) in [(1usize, 4usize, 7usize), (2, 5, 8)].into_iter().enumerate() {
        let hip_world = t.pelvis + root * geo.hip[side];
        let [h, k, a] = solve_leg(&root, &hip_world, &t.ankles[side], geo);
        local[hip_j] = h;
        local[knee_j] = k;
        local[ankle_j] = a;
    }
    let per = t.lean / 3.0;
    for j in [3, 6, 9] {
        local[j] = rot_x(per);
    }
    local[12] = rot_y(t.neck_yaw) * rot_x(t.neck_pitch);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let [la, ra] = t.arms;
    local[16] = rot_x(-la.flex) * rot_z(-(half_pi - la.abduct));
    local[17] = rot_x(-ra.flex) * rot_z(half_pi - ra.abduct);
    local[18] = rot_y(-la.elbow);
    local[19] = rot_y(ra.elbow);
    let mut pose = Vec::with_capacity(POSE_DIM);
    for m in &local {
        pose.extend_from_slice(&matrix_to_rot6d(m).expect("solver yields rotations").0);
    }
    (pose, t.pelvis)
}

/// Frame-by-frame target track assembled from holds, eased blends and walks.
struct Track {
    frames: Vec<Targets>,
}

impl Track {
    fn start(t: Targets) -> Self {
        Self { frames: vec![t] }
    }

    fn last(&self) -> Targets {
        *self.frames.last().unwrap()
    }

    fn hold(&mut self, n: usize) {
        let t = self.last();
        self.frames.extend(std::iter::repeat(t).take(n));
    }

    fn blend_to(&mut self, to: Targets, n: usize) {
        let from = self.last();
        for i in 1..=n {
            self.frames.push(from.lerp(&to, ease(i as f64 / n as f64)));
        }
    }

    /// Straight-line gait: alternating swing feet, each step moving a foot
    /// from behind to ahead, closing with feet side by side.
    fn walk(&mut self, steps: usize, step_len: f64, step_frames: usize, geo: &LegGeometry, stand_height: f64) {
        let start = self.last();
        let f = forward(start.yaw);
        let mut feet = start.ankles;
        let base_pelvis = start.pelvis;
        for i in 0..=steps {
            let swing = i % 2;
            let advance = if i == 0 || i == steps { step_len } else { 2.0 * step_len };
            let from = feet[swing];
            let to = from + f * advance;
            for k in 1..=step_frames {
                let s = k as f64 / step_frames as f64;
                let mut ankles = feet;
                let mut p = from.lerp(&to, ease(s));
                p.z += 0.05 * (std::f64::consts::PI * s).sin();
                ankles[swing] = p;
                let mid = (ankles[0] + ankles[1]) * 0.5;
                let lateral_center = base_pelvis - f * f.dot(&base_pelvis);
                let mut pelvis = f * f.dot(&mid) + lateral_center;
                pelvis.z = pelvis_height_limit(&pelvis, start.yaw, &ankles, geo).min(stand_height);
                let phase = std::f64::consts::PI * (i as f64 + s);
                let swing_arm = 0.25 * phase.sin();
                let mut arms = start.arms;
                arms[0].flex = start.arms[0].flex + swing_arm;
                arms[1].flex = start.arms[1].flex - swing_arm;
                self.frames.push(Targets {
                    pelvis,
                    ankles,
                    arms,
                    ..start
                });
            }
            feet[swing] = to;
        }
    }
}

/// Highest pelvis that keeps both ankles within 99 % of leg reach.
fn pelvis_height_limit(pelvis: &Vector3<f64>, yaw: f64, ankles: &[Vector3<f64>; 2], geo: &LegGeometry) -> f64 {
    let root = upright_root(yaw);
    let reach = 0.99 * geo.reach();
    let mut limit = f64::INFINITY;
    for side in 0..2 {
        let hip_rel = root * geo.hip[side];
        let hip_xy = Vector3::new(pelvis.x + hip_rel.x, pelvis.y + hip_rel.y, 0.0);
        let a = ankles[side];
        let horiz2 = (hip_xy.x - a.x).powi(2) + (hip_xy.y - a.y).powi(2);
        let dz = (reach * reach - horiz2).max(0.0).sqrt();
        limit = limit.min(a.z + dz - hip_rel.z);
    }
    limit
}

struct MotionContext<'a> {
    tree: &'a KinematicTree,
    geo: LegGeometry,
    ankle_z: f64,
    stand_height: f64,
    rng: ChaCha8Rng,
}

impl<'a> MotionContext<'a> {
    fn standing(&self, xy: Vector3<f64>, yaw: f64, stance: f64) -> Targets {
        let l = left(yaw);
        let ankles = [
            Vector3::new(xy.x, xy.y, self.ankle_z) + l * stance,
            Vector3::new(xy.x, xy.y, self.ankle_z) - l * stance,
        ];
        let mut t = Targets {
            pelvis: Vector3::new(xy.x, xy.y, 0.0),
            yaw,
            lean: 0.0,
            neck_pitch: 0.0,
            neck_yaw: 0.0,
            arms: [Arm::hanging(), Arm::hanging()],
            ankles,
        };
        t.pelvis.z = pelvis_height_limit(&t.pelvis, yaw, &ankles, &self.geo).min(self.stand_height);
        t
    }

    fn random_arms(&mut self) -> [Arm; 2] {
        let flex = self.rng.gen_range(0.2..0.7);
        let elbow = self.rng.gen_range(0.6..1.4);
        let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.1..0.1);
        [
            Arm { flex: flex + jitter(&mut self.rng), abduct: 0.15, elbow: elbow + jitter(&mut self.rng) },
            Arm { flex: flex + jitter(&mut self.rng), abduct: 0.15, elbow: elbow + jitter(&mut self.rng) },
        ]
    }

    fn frames(&mut self, lo: f64, hi: f64) -> usize {
        (self.rng.gen_range(lo..hi) * DEFAULT_FPS).round() as usize
    }
}

fn axis_yaws() -> [f64; 4] {
    use std::f64::consts::{FRAC_PI_2, PI};
    [0.0, FRAC_PI_2, PI, -FRAC_PI_2]
}

fn inside_floor(scene: &Scene, p: &Vector3<f64>, margin: f64) -> bool {
    scene
        .props(PrimitiveKind::Floor)
        .any(|f| p.x >= f.min[0] + margin && p.x <= f.max[0] - margin && p.y >= f.min[1] + margin && p.y <= f.max[1] - margin)
}

fn clear_of_props(scene: &Scene, p: &Vector3<f64>, clearance: f64) -> bool {
    scene
        .primitives
        .iter()
        .filter(|q| q.kind != PrimitiveKind::Floor)
        .all(|q| q.signed_distance(&Vector3::new(p.x, p.y, q.min[2] + 0.05)) > clearance)
}

/// Descent into a seated or squatting hold, then optionally back up.
fn lowered_hold(ctx: &mut MotionContext, stand: Targets, low: Targets) -> Track {
    let mut track = Track::start(stand);
    let n = ctx.frames(0.3, 0.6);
    track.hold(n);
    let mut mid = stand.lerp(&low, 0.5);
    mid.lean = low.lean + 0.25;
    let d1 = ctx.frames(0.45, 0.6);
    track.blend_to(mid, d1);
    let d2 = ctx.frames(0.45, 0.6);
    track.blend_to(low, d2);
    let hold = ctx.frames(1.5, 2.0);
    // Small head motion while holding.
    let mut look = low;
    look.neck_yaw = ctx.rng.gen_range(-0.4..0.4);
    look.neck_pitch = low.neck_pitch + ctx.rng.gen_range(-0.15..0.15);
    track.blend_to(look, hold / 2);
    track.blend_to(low, hold - hold / 2);
    if ctx.rng.gen_bool(0.5) {
        let r1 = ctx.frames(0.45, 0.6);
        track.blend_to(mid, r1);
        let r2 = ctx.frames(0.45, 0.6);
        track.blend_to(stand, r2);
        let n = ctx.frames(0.2, 0.4);
        track.hold(n);
    }
    track
}

fn seated_ankles(ctx: &MotionContext, pelvis: &Vector3<f64>, yaw: f64, stance: f64) -> [Vector3<f64>; 2] {
    let f = forward(yaw);
    let l = left(yaw);
    let hip_z = pelvis.z + (upright_root(yaw) * ctx.geo.hip[0]).z;
    let dz = (hip_z - ctx.ankle_z).min(ctx.geo.shin * 0.999);
    let ahead = ctx.geo.thigh + (ctx.geo.shin.powi(2) - dz * dz).sqrt();
    let base = Vector3::new(pelvis.x, pelvis.y, ctx.ankle_z) + f * ahead;
    [base + l * stance, base - l * stance]
}

fn motion_sit(ctx: &mut MotionContext, scene: &Scene) -> Result<Track, SynthError> {
    let boxes: Vec<ScenePrimitive> = scene.props(PrimitiveKind::Box).cloned().collect();
    if boxes.is_empty() {
        return Err(SynthError::MissingProp(MotionKind::SitOnBox));
    }
    let b = boxes[ctx.rng.gen_range(0..boxes.len())].clone();
    let mut yaws = axis_yaws().to_vec();
    let start = ctx.rng.gen_range(0..4);
    yaws.rotate_left(start);
    for yaw in yaws {
        let f = forward(yaw);
        let c = b.center();
        // Distance from the box center to its face in the facing direction.
        let face = b.half().x * f.x.abs() + b.half().y * f.y.abs();
        let seat_xy = Vector3::new(c.x, c.y, 0.0) + f * (face - 0.12);
        let pelvis = Vector3::new(seat_xy.x, seat_xy.y, b.top() + 0.045);
        let stance = ctx.rng.gen_range(0.08..0.12);
        let ankles = seated_ankles(ctx, &pelvis, yaw, stance);
        let feet_mid = (ankles[0] + ankles[1]) * 0.5;
        if !inside_floor(scene, &(feet_mid + f * 0.3), 0.2) || !clear_of_props(scene, &(feet_mid + f * 0.15), 0.15) {
            continue;
        }
        let mut stand = ctx.standing(feet_mid - f * 0.03, yaw, stance);
        stand.ankles = ankles;
        let arms = ctx.random_arms();
        let lean = ctx.rng.gen_range(0.1..0.4);
        let low = Targets {
            pelvis,
            yaw,
            lean,
            neck_pitch: -0.5 * lean,
            neck_yaw: 0.0,
            arms,
            ankles,
        };
        return Ok(lowered_hold(ctx, stand, low));
    }
    Err(SynthError::MissingProp(MotionKind::SitOnBox))
}

fn free_spot(ctx: &mut MotionContext, scene: &Scene, clearance: f64, margin: f64) -> Option<Vector3<f64>> {
    let h = scene
        .props(PrimitiveKind::Floor)
        .map(|f| f.max[0])
        .fold(0.0, f64::max);
    for _ in 0..200 {
        let p = Vector3::new(ctx.rng.gen_range(-h..h), ctx.rng.gen_range(-h..h), 0.0);
        if inside_floor(scene, &p, margin) && clear_of_props(scene, &p, clearance) {
            return Some(p);
        }
    }
    None
}

fn motion_squat(ctx: &mut MotionContext, scene: &Scene) -> Result<Track, SynthError> {
    let spot = free_spot(ctx, scene, 0.75, 0.8).ok_or(SynthError::Infeasible(200))?;
    let yaw = axis_yaws()[ctx.rng.gen_range(0..4)] + ctx.rng.gen_range(-0.3..0.3);
    let f = forward(yaw);
    let stance = ctx.rng.gen_range(0.08..0.12);
    let stand = ctx.standing(spot, yaw, stance);
    let back = ctx.rng.gen_range(0.10..0.20);
    // Same pelvis height band as a seated hold on the boxes.
    let height = ctx.rng.gen_range(0.33 + 0.045..0.45 + 0.045);
    let mut pelvis = stand.pelvis - f * back;
    pelvis.z = height;
    let lean = ctx.rng.gen_range(0.1..0.4);
    let arms = ctx.random_arms();
    let low = Targets {
        pelvis,
        lean,
        neck_pitch: -0.5 * lean,
        arms,
        ..stand
    };
    Ok(lowered_hold(ctx, stand, low))
}

fn motion_walk(ctx: &mut MotionContext, scene: &Scene) -> Result<Track, SynthError> {
    for _ in 0..50 {
        let Some(spot) = free_spot(ctx, scene, 0.4, 0.5) else { break };
        let yaw = ctx.rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let steps = ctx.rng.gen_range(3..6);
        let step_len = ctx.rng.gen_range(0.3..0.42);
        let end = spot + forward(yaw) * (step_len * 2.0 * steps as f64);
        let path_clear = (0..=10).all(|k| clear_of_props(scene, &spot.lerp(&end, k as f64 / 10.0), 0.4));
        if !inside_floor(scene, &end, 0.5) || !path_clear {
            continue;
        }
        let stance = ctx.rng.gen_range(0.08..0.11);
        let mut track = Track::start(ctx.standing(spot, yaw, stance));
        let n = ctx.frames(0.3, 0.5);
        track.hold(n);
        let step_frames = ctx.frames(0.45, 0.6);
        let stand_height = ctx.stand_height;
        track.walk(steps, step_len, step_frames, &ctx.geo, stand_height);
        let n = ctx.frames(0.3, 0.6);
        track.hold(n);
        return Ok(track);
    }
    Err(SynthError::Infeasible(50))
}

fn motion_reach(ctx: &mut MotionContext, scene: &Scene) -> Result<Track, SynthError> {
    let walls: Vec<ScenePrimitive> = scene.props(PrimitiveKind::Wall).cloned().collect();
    if walls.is_empty() {
        return Err(SynthError::MissingProp(MotionKind::ReachWall));
    }
    let w = walls[ctx.rng.gen_range(0..walls.len())].clone();
    let c = w.center();
    // The wall's long axis and the facing direction toward it.
    let (normal, along_axis) = if w.half().x < w.half().y {
        (Vector3::new(-c.x.signum(), 0.0, 0.0), 1)
    } else {
        (Vector3::new(0.0, -c.y.signum(), 0.0), 0)
    };
    let facing = -normal;
    let yaw = facing.x.atan2(-facing.y);
    let face_coord = if along_axis == 1 {
        if normal.x > 0.0 { w.max[0] } else { w.min[0] }
    } else if normal.y > 0.0 {
        w.max[1]
    } else {
        w.min[1]
    };
    let half_len = if along_axis == 1 { w.half().y } else { w.half().x };
    let along = ctx.rng.gen_range(-(half_len - 0.5)..(half_len - 0.5));
    let side = ctx.rng.gen_range(0..2);
    let mut reach = [Arm::hanging(), Arm::hanging()];
    reach[side] = Arm {
        flex: ctx.rng.gen_range(1.1..1.5),
        abduct: ctx.rng.gen_range(0.0..0.3),
        elbow: ctx.rng.gen_range(0.0..0.25),
    };
    let stance = ctx.rng.gen_range(0.08..0.11);
    // Furthest body surface along the facing direction over the whole raise,
    // solved at the origin.
    let rest = ctx.standing(Vector3::zeros(), yaw, stance);
    let mut raised = rest;
    raised.arms = reach;
    let mut extent = f64::NEG_INFINITY;
    for i in 0..=20 {
        let (pose, root) = solve_pose(&rest.lerp(&raised, i as f64 / 20.0), &ctx.geo);
        let fk = forward_kinematics(&pose, &[root], ctx.tree)?;
        let caps = body_capsules(fk.positions.frame(0), ctx.tree, ctx.tree.bone_radii());
        for c in &caps.capsules {
            extent = extent.max(facing.dot(&c.a).max(facing.dot(&c.b)) + c.radius);
        }
    }
    let mut end = Vector3::zeros();
    end[along_axis] = c[along_axis] + along;
    let stand_coord = face_coord + normal[1 - along_axis] * (extent - 0.002);
    end[1 - along_axis] = stand_coord;
    let steps = ctx.rng.gen_range(1..3);
    let step_len = ctx.rng.gen_range(0.25..0.35);
    let start = end - facing * (2.0 * step_len * steps as f64);
    if !inside_floor(scene, &start, 0.3) || !clear_of_props(scene, &start, 0.4) {
        return Err(SynthError::Infeasible(1));
    }
    let mut track = Track::start(ctx.standing(start, yaw, stance));
    let n = ctx.frames(0.2, 0.4);
    track.hold(n);
    let step_frames = ctx.frames(0.45, 0.6);
    let stand_height = ctx.stand_height;
    track.walk(steps, step_len, step_frames, &ctx.geo, stand_height);
    let mut at_wall = ctx.standing(end, yaw, stance);
    at_wall.arms = reach;
    at_wall.neck_pitch = -0.2 * (reach[side].flex - 1.5);
    let settle = track.last();
    let mut settle_to = ctx.standing(end, yaw, stance);
    settle_to.arms = settle.arms;
    let n = ctx.frames(0.2, 0.3);
    track.blend_to(settle_to, n);
    let n = ctx.frames(0.7, 1.0);
    track.blend_to(at_wall, n);
    let n = ctx.frames(0.8, 1.2);
    track.hold(n);
    let n = ctx.frames(0.6, 0.9);
    track.blend_to(settle_to, n);
    let n = ctx.frames(0.2, 0.4);
    track.hold(n);
    Ok(track)
}

pub fn generate_motion(
    seed: u64,
    scene: &Scene,
    kind: MotionKind,
    tree: &KinematicTree,
) -> Result<LabeledSequence, SynthError> {
    let geo = LegGeometry::new(tree);
    let ankle_z = scene.z_ground() + LegGeometry::ankle_clearance(tree);
    let stand_height = ankle_z + 0.985 * geo.reach() - tree.offset(1).y;
    let mut ctx = MotionContext {
        tree,
        geo,
        ankle_z,
        stand_height,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let track = match kind {
        MotionKind::Walk => motion_walk(&mut ctx, scene)?,
        MotionKind::Squat => motion_squat(&mut ctx, scene)?,
        MotionKind::SitOnBox => motion_sit(&mut ctx, scene)?,
        MotionKind::ReachWall => motion_reach(&mut ctx, scene)?,
    };
    let mut pose32 = Vec::with_capacity(track.frames.len() * POSE_DIM);
    let mut trans32 = Vec::with_capacity(track.frames.len());
    for t in &track.frames {
        let (pose, root) = solve_pose(t, &ctx.geo);
        pose32.extend(pose.iter().map(|&v| v as f32));
        trans32.push([root.x as f32, root.y as f32, root.z as f32]);
    }
    // Pad short clips so every sequence holds at least one full window.
    while trans32.len() < WINDOW {
        let last = pose32[pose32.len() - POSE_DIM..].to_vec();
        pose32.extend(last);
        trans32.push(*trans32.last().unwrap());
    }
    let mut seq = LabeledSequence {
        kind,
        fps: DEFAULT_FPS,
        pose: pose32,
        translation: trans32,
        contacts: Vec::new(),
        primitives: scene.primitives.clone(),
    };
    let fk = seq.motion().forward_kinematics(tree)?;
    let mut worst = 0.0f64;
    for t in 0..seq.n_frames() {
        let caps = body_capsules(fk.positions.frame(t), tree, tree.bone_radii());
        let d = penetration_depth(&caps, &scene.primitives, true);
        worst = worst.max(d);
    }
    if worst > MAX_PENETRATION {
        return Err(SynthError::Penetration(worst));
    }
    seq.contacts = label_contacts(&fk.positions, &scene.primitives, CONTACT_DISTANCE);
    Ok(seq)
}

/// Additive Gaussian tracker noise: position σ in meters, rotation σ in
/// radians (applied as a random small rotation per tracker and frame).
pub fn add_tracker_noise(obs: &mut SparseObservationWindow, sigma_pos: f64, sigma_rot: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = Normal::new(0.0, sigma_pos).unwrap();
    let rot = Normal::new(0.0, sigma_rot).unwrap();
    for t in 0..obs.n_frames() {
        let row = obs.0.row_mut(t);
        for k in 0..3 {
            let base = k * TRACKER_WIDTH;
            for c in 0..3 {
                row[base + c] += pos.sample(&mut rng);
            }
            let r6 = Rot6D::from_slice(&row[base + ROTATION_OFFSET..base + ROTATION_OFFSET + 6]);
            let m = rot6d_to_matrix(&r6).expect("tracker rotations decode");
            let noise = crate::rotations::axis_angle(&Vector3::new(
                rot.sample(&mut rng),
                rot.sample(&mut rng),
                rot.sample(&mut rng),
            ));
            let noisy = matrix_to_rot6d(&(noise * m)).expect("rotation");
            row[base + ROTATION_OFFSET..base + ROTATION_OFFSET + 6].copy_from_slice(&noisy.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Test => 0x7465_7374,
        }
    }
}

/// Motion mix of a dataset: relative weights per kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kinds: Vec<(MotionKind, u32)>,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kinds: MotionKind::ALL.iter().map(|&k| (k, 1)).collect(),
            scene: SceneSpec::default(),
        }
    }
}

impl DatasetSpec {
    /// Sit and reach heavy, with squats as the lookalike of sitting.
    pub fn interaction_heavy() -> Self {
        Self {
            kinds: vec![
                (MotionKind::SitOnBox, 2),
                (MotionKind::Squat, 1),
                (MotionKind::ReachWall, 1),
            ],
            scene: SceneSpec::default(),
        }
    }

    fn kind_for(&self, index: usize) -> MotionKind {
        let total: u32 = self.kinds.iter().map(|k| k.1).sum();
        let mut slot = (index as u32) % total.max(1);
        for &(k, w) in &self.kinds {
            if slot < w {
                return k;
            }
            slot -= w;
        }
        self.kinds[0].0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    pub sequence: LabeledSequence,
    pub cloud: EnvironmentCloud,
}

/// Per-sequence seed: a SplitMix64 hash of (dataset seed, split, index).
pub fn sequence_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut z = seed ^ split.tag().rotate_left(32) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates one episode, retrying with derived seeds when a scene cannot host
/// the motion.
pub fn generate_episode(
    base_seed: u64,
    kind: MotionKind,
    spec: &SceneSpec,
    tree: &KinematicTree,
) -> Result<(u64, Scene, LabeledSequence), SynthError> {
    const RETRIES: u64 = 64;
    let mut last_err = None;
    for attempt in 0..RETRIES {
        let seed = base_seed.wrapping_add(attempt.wrapping_mul(0x632b_e59b_d9b4_e019));
        let scene = match generate_scene(seed, spec) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        match generate_motion(seed ^ 0xa5a5, &scene, kind, tree) {
            Ok(seq) => return Ok((seed, scene, seq)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or(SynthError::Infeasible(RETRIES as usize)))
}

pub fn generate_split(
    count: usize,
    seed: u64,
    split: Split,
    spec: &DatasetSpec,
    tree: &KinematicTree,
) -> Result<Vec<Episode>, SynthError> {
    (0..count)
        .map(|i| {
            let kind = spec.kind_for(i);
            let (s, scene, sequence) = generate_episode(sequence_seed(seed, split, i), kind, &spec.scene, tree)?;
            Ok(Episode {
                name: format!("seq_{i:04}"),
                split,
                seed: s,
                sequence,
                cloud: scene.cloud,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    pub kind: MotionKind,
    pub frames: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub fps: f64,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub skeleton_hash: String,
    pub sequences: Vec<ManifestEntry>,
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f32>) -> Result<(), SynthError> {
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32s(path: &Path) -> Result<Vec<f32>, SynthError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(SynthError::Format(format!("{} is not a f32 array", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_episode(dir: &Path, episode: &Episode) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let seq = &episode.sequence;
    write_f32s(&dir.join("pose.f32"), seq.pose.iter().copied())?;
    write_f32s(&dir.join("translation.f32"), seq.translation.iter().flatten().copied())?;
    let contacts = dir.join("contacts.u8");
    std::fs::write(&contacts, &seq.contacts).map_err(io_err(&contacts))?;
    let scene = dir.join("scene.json");
    let json = serde_json::to_string_pretty(&seq.primitives).expect("primitives serialize");
    std::fs::write(&scene, json).map_err(io_err(&scene))?;
    episode.cloud.save(dir.join("cloud.pcld"))?;
    Ok(())
}

pub fn read_episode(dir: &Path, entry: &ManifestEntry, fps: f64) -> Result<Episode, SynthError> {
    let pose = read_f32s(&dir.join("pose.f32"))?;
    let flat = read_f32s(&dir.join("translation.f32"))?;
    let translation: Vec<[f32; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let contacts_path = dir.join("contacts.u8");
    let contacts = std::fs::read(&contacts_path).map_err(io_err(&contacts_path))?;
    let scene_path = dir.join("scene.json");
    let scene_text = std::fs::read_to_string(&scene_path).map_err(io_err(&scene_path))?;
    let primitives: Vec<ScenePrimitive> =
        serde_json::from_str(&scene_text).map_err(|e| SynthError::Format(e.to_string()))?;
    let frames = translation.len();
    if pose.len() != frames * POSE_DIM || contacts.len() != frames * NUM_JOINTS || frames != entry.frames {
        return Err(SynthError::Format(format!("{}: inconsistent array sizes", dir.display())));
    }
    let cloud = EnvironmentCloud::load(dir.join("cloud.pcld"))?;
    Ok(Episode {
        name: entry.name.clone(),
        split: entry.split,
        seed: entry.seed,
        sequence: LabeledSequence {
            kind: entry.kind,
            fps,
            pose,
            translation,
            contacts,
            primitives,
        },
        cloud,
    })
}

/// Writes `n_train` + `n_test` episodes plus `manifest.json` and
/// `skeleton.toml` under `out`.
pub fn make_dataset(
    n_train: usize,
    n_test: usize,
    seed: u64,
    out: &Path,
    spec: &DatasetSpec,
    tree: &KinematicTree,
) -> Result<DatasetManifest, SynthError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut entries = Vec::new();
    for (split, count) in [(Split::Train, n_train), (Split::Test, n_test)] {
        for ep in generate_split(count, seed, split, spec, tree)? {
            write_episode(&out.join(split.as_str()).join(&ep.name), &ep)?;
            entries.push(ManifestEntry {
                name: ep.name.clone(),
                split,
                kind: ep.sequence.kind,
                frames: ep.sequence.n_frames(),
                seed: ep.seed,
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        fps: DEFAULT_FPS,
        seed,
        train_count: n_train,
        test_count: n_test,
        skeleton_hash: tree.config_hash(),
        sequences: entries,
    };
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(io_err(&path))?;
    let skel = out.join("skeleton.toml");
    std::fs::write(&skel, tree.to_toml()).map_err(io_err(&skel))?;
    Ok(manifest)
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub tree: KinematicTree,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, SynthError> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| SynthError::Format(e.to_string()))?;
        if manifest.format_version != DATASET_VERSION {
            return Err(SynthError::Format(format!(
                "unsupported dataset version {}",
                manifest.format_version
            )));
        }
        let tree = KinematicTree::load(root.join("skeleton.toml"))?;
        if tree.config_hash() != manifest.skeleton_hash {
            return Err(SynthError::Format("skeleton hash does not match manifest".into()));
        }
        Ok(Self { root, manifest, tree })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Episode>, SynthError> {
        self.manifest
            .sequences
            .iter()
            .filter(|e| e.split == split)
            .map(|e| read_episode(&self.root.join(split.as_str()).join(&e.name), e, self.manifest.fps))
            .collect()
    }
}
