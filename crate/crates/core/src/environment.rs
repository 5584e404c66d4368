//! Environment point clouds: storage, crops around the body, ground removal,
//! terrain height and per-point spatial priors.
//!
//! # Cloud file format
//!
//! Binary (`.pcld`), all little-endian:
//!
//! | bytes        | content                               |
//! |--------------|---------------------------------------|
//! | 4            | magic `PCLD`                          |
//! | 4            | format version (`u32`, currently 1)   |
//! | 8            | point count `n` (`u64`)               |
//! | 4            | `z_ground` (`f32`, meters)            |
//! | 12·n         | `n × 3` points (`f32` x, y, z)        |
//! | n            | ground mask, one byte per point (0/1) |
//!
//! Plain text is also accepted: one `x y z` triple per line, `#` comments.
//! The ground plane of a text cloud is its lowest z and the mask is inferred
//! with [`GROUND_BAND`].

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Half-width of the height band classified as ground (τ_g), meters.
pub const GROUND_BAND: f64 = 0.02;
/// Horizontal radius used to query terrain height (r_t), meters.
pub const TERRAIN_RADIUS: f64 = 0.3;
/// Default crop radius around the body, meters.
pub const CROP_RADIUS: f64 = 1.0;

const MAGIC: &[u8; 4] = b"PCLD";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("invalid cloud: {0}")]
    Invalid(String),
    #[error("cloud I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("cloud format: {0}")]
    Format(String),
}

pub type Point = [f32; 3];

fn to_vec(p: &Point) -> Vector3<f64> {
    Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentCloud {
    points: Vec<Point>,
    ground_mask: Vec<bool>,
    z_ground: f64,
}

impl EnvironmentCloud {
    /// Checked constructor: at least one point, finite coordinates, and every
    /// ground-masked point within [`GROUND_BAND`] of `z_ground`.
    pub fn new(
        points: Vec<Point>,
        ground_mask: Vec<bool>,
        z_ground: f64,
    ) -> Result<Self, EnvironmentError> {
        if points.is_empty() {
            return Err(EnvironmentError::Invalid("cloud has no points".into()));
        }
        let cloud = Self::new_unchecked(points, ground_mask, z_ground)?;
        for (p, &g) in cloud.points.iter().zip(&cloud.ground_mask) {
            if g && (p[2] as f64 - z_ground).abs() > GROUND_BAND + 1e-6 {
                return Err(EnvironmentError::Invalid(format!(
                    "ground point at z={} outside the ±{GROUND_BAND} m band around {z_ground}",
                    p[2]
                )));
            }
        }
        Ok(cloud)
    }

    /// Skips the ground-band check so masks can mark multi-level terrain.
    pub fn new_unchecked(
        points: Vec<Point>,
        ground_mask: Vec<bool>,
        z_ground: f64,
    ) -> Result<Self, EnvironmentError> {
        if points.len() != ground_mask.len() {
            return Err(EnvironmentError::Invalid(format!(
                "{} points but {} mask entries",
                points.len(),
                ground_mask.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) || !z_ground.is_finite() {
            return Err(EnvironmentError::Invalid("non-finite coordinate".into()));
        }
        Ok(Self {
            points,
            ground_mask,
            z_ground,
        })
    }

    /// Builds a cloud whose ground mask is inferred from the height band.
    pub fn with_inferred_ground(points: Vec<Point>, z_ground: f64) -> Result<Self, EnvironmentError> {
        let mask = points
            .iter()
            .map(|p| (p[2] as f64 - z_ground).abs() <= GROUND_BAND)
            .collect();
        Self::new(points, mask, z_ground)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn ground_mask(&self) -> &[bool] {
        &self.ground_mask
    }

    pub fn z_ground(&self) -> f64 {
        self.z_ground
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True for the cloud left after removing ground from an all-ground scan.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), EnvironmentError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.points.len() as u64).to_le_bytes())?;
        w.write_all(&(self.z_ground as f32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.points.len() * 13);
        for p in &self.points {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend(self.ground_mask.iter().map(|&g| g as u8));
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self, EnvironmentError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvironmentError> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(EnvironmentError::Format("missing PCLD header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(EnvironmentError::Format(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let z_ground = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
        let body = &bytes[20..];
        if body.len() != n * 13 {
            return Err(EnvironmentError::Format(format!(
                "expected {} payload bytes for {n} points, found {}",
                n * 13,
                body.len()
            )));
        }
        let (coords, mask) = body.split_at(n * 12);
        let points = coords
            .chunks_exact(12)
            .map(|c| {
                [
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                    f32::from_le_bytes(c[8..12].try_into().unwrap()),
                ]
            })
            .collect();
        let ground_mask = mask
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(EnvironmentError::Format(format!("bad mask byte {other}"))),
            })
            .collect::<Result<_, _>>()?;
        Self::new_unchecked(points, ground_mask, z_ground)
    }

    pub fn parse_text(text: &str) -> Result<Self, EnvironmentError> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f32> = line
                .split_whitespace()
                .map(|s| s.parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|e| EnvironmentError::Format(format!("line {}: {e}", i + 1)))?;
            if vals.len() != 3 {
                return Err(EnvironmentError::Format(format!(
                    "line {}: expected 3 values, found {}",
                    i + 1,
                    vals.len()
                )));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        let z_ground = points
            .iter()
            .map(|p| p[2] as f64)
            .fold(f64::INFINITY, f64::min);
        if !z_ground.is_finite() {
            return Err(EnvironmentError::Invalid("cloud has no points".into()));
        }
        Self::with_inferred_ground(points, z_ground)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EnvironmentError> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    /// Loads the binary format, or the text format when the header is absent.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvironmentError> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| EnvironmentError::Format("neither PCLD nor UTF-8 text".into()))?;
            Self::parse_text(&text)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropShape {
    Circle,
    Square,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CroppedCloud {
    pub points: Vec<Point>,
    pub center: [f64; 2],
    /// Set when no scanned point fell inside the footprint and the crop was
    /// filled with synthetic ground points instead.
    pub synthetic: bool,
}

impl CroppedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Resamples `candidates` to exactly `n` indices. With enough candidates the
/// draw is without replacement; otherwise every candidate is kept once and the
/// remainder is drawn with replacement.
fn resample(candidates: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if candidates.len() >= n {
        sample(rng, candidates.len(), n)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    } else {
        let mut out = candidates.to_vec();
        while out.len() < n {
            out.push(candidates[rng.gen_range(0..candidates.len())]);
        }
        out
    }
}

fn crop_with(
    cloud: &EnvironmentCloud,
    center_xy: [f64; 2],
    n: usize,
    seed: u64,
    inside: impl Fn(f64, f64) -> bool,
    fallback: impl Fn(&mut ChaCha8Rng) -> (f64, f64),
) -> CroppedCloud {
    assert!(n >= 1, "crop needs at least one point");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| inside(p[0] as f64 - center_xy[0], p[1] as f64 - center_xy[1]))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        let z = cloud.z_ground as f32;
        let points = (0..n)
            .map(|_| {
                let (dx, dy) = fallback(&mut rng);
                [(center_xy[0] + dx) as f32, (center_xy[1] + dy) as f32, z]
            })
            .collect();
        return CroppedCloud {
            points,
            center: center_xy,
            synthetic: true,
        };
    }
    let points = resample(&candidates, n, &mut rng)
        .into_iter()
        .map(|i| cloud.points[i])
        .collect();
    CroppedCloud {
        points,
        center: center_xy,
        synthetic: false,
    }
}

pub fn crop_circular(
    cloud: &EnvironmentCloud,
    center_xy: [f64; 2],
    radius: f64,
    n: usize,
    seed: u64,
) -> CroppedCloud {
    assert!(radius > 0.0);
    let r2 = radius * radius;
    crop_with(
        cloud,
        center_xy,
        n,
        seed,
        |dx, dy| dx * dx + dy * dy <= r2,
        |rng| {
            let r = radius * rng.gen::<f64>().sqrt();
            let a = rng.gen::<f64>() * std::f64::consts::TAU;
            (r * a.cos(), r * a.sin())
        },
    )
}

pub fn crop_square(
    cloud: &EnvironmentCloud,
    center_xy: [f64; 2],
    half_side: f64,
    n: usize,
    seed: u64,
) -> CroppedCloud {
    assert!(half_side > 0.0);
    crop_with(
        cloud,
        center_xy,
        n,
        seed,
        |dx, dy| dx.abs() <= half_side && dy.abs() <= half_side,
        |rng| {
            (
                rng.gen_range(-half_side..=half_side),
                rng.gen_range(-half_side..=half_side),
            )
        },
    )
}

pub fn crop(
    cloud: &EnvironmentCloud,
    shape: CropShape,
    center_xy: [f64; 2],
    extent: f64,
    n: usize,
    seed: u64,
) -> CroppedCloud {
    match shape {
        CropShape::Circle => crop_circular(cloud, center_xy, extent, n, seed),
        CropShape::Square => crop_square(cloud, center_xy, extent, n, seed),
    }
}

/// Drops ground-masked points. An all-ground cloud yields an empty cloud.
pub fn remove_ground(cloud: &EnvironmentCloud) -> EnvironmentCloud {
    let (points, ground_mask) = cloud
        .points
        .iter()
        .zip(&cloud.ground_mask)
        .filter(|(_, &g)| !g)
        .map(|(p, &g)| (*p, g))
        .unzip();
    EnvironmentCloud {
        points,
        ground_mask,
        z_ground: cloud.z_ground,
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

/// Local ground elevation at `xy`: the median height of ground points within
/// [`TERRAIN_RADIUS`] (or `z_ground` when there are none), averaged with the
/// median stationary foot height when a foot history is supplied.
pub fn terrain_height(
    cloud: &EnvironmentCloud,
    xy: [f64; 2],
    stationary_foot_heights: &[f64],
) -> f64 {
    let r2 = TERRAIN_RADIUS * TERRAIN_RADIUS;
    let mut nearby: Vec<f64> = cloud
        .points
        .iter()
        .zip(&cloud.ground_mask)
        .filter(|(p, &g)| {
            let dx = p[0] as f64 - xy[0];
            let dy = p[1] as f64 - xy[1];
            g && dx * dx + dy * dy <= r2
        })
        .map(|(p, _)| p[2] as f64)
        .collect();
    let from_cloud = median(&mut nearby).unwrap_or(cloud.z_ground);
    let mut feet = stationary_foot_heights.to_vec();
    match median(&mut feet) {
        Some(f) => 0.5 * (from_cloud + f),
        None => from_cloud,
    }
}

/// Per-point `[distance, unit direction]` relative to the body center, width 4.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencePrior {
    pub features: Vec<[f32; 4]>,
}

pub fn spatial_salience_features(crop: &CroppedCloud, human_center: &Vector3<f64>) -> SaliencePrior {
    let features = crop
        .points
        .iter()
        .map(|p| {
            let d = to_vec(p) - human_center;
            let dist = d.norm();
            if dist < 1e-8 {
                [0.0; 4]
            } else {
                let u = d / dist;
                [dist as f32, u.x as f32, u.y as f32, u.z as f32]
            }
        })
        .collect();
    SaliencePrior { features }
}
