//! 6D rotation representation and rotation-matrix helpers.
//!
//! A 6D rotation is the first two columns of a rotation matrix laid out
//! column-major: `[c0.x, c0.y, c0.z, c1.x, c1.y, c1.z]`. Decoding runs
//! Gram-Schmidt on the two columns and completes the frame with a cross
//! product, so any pair of non-parallel vectors maps to a proper rotation.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type RotMatrix = Matrix3<f64>;

/// Minimum column norm accepted by [`rot6d_to_matrix`].
pub const DEGENERACY_EPS: f64 = 1e-8;
/// Orthonormality tolerance for [`validate_rotation`].
pub const ORTHONORMAL_TOL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("6D rotation has non-finite component(s): {0:?}")]
    NonFinite([f64; 6]),
    #[error("degenerate 6D rotation: {0}")]
    Degenerate(&'static str),
    #[error("matrix is not a rotation (orthonormality residual {residual:.3e}, det {det:.6})")]
    NotARotation { residual: f64, det: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_slice(values: &[f64]) -> Self {
        let mut out = [0.0; 6];
        out.copy_from_slice(&values[..6]);
        Rot6D(out)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn rot6d_to_matrix(r: &Rot6D) -> Result<RotMatrix, RotationError> {
    let v = &r.0;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(RotationError::NonFinite(*v));
    }
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let na = a.norm();
    if na <= DEGENERACY_EPS {
        return Err(RotationError::Degenerate("first column has near-zero norm"));
    }
    let c0 = a / na;
    let b_perp = b - c0 * c0.dot(&b);
    let nb = b_perp.norm();
    if nb <= DEGENERACY_EPS {
        return Err(RotationError::Degenerate(
            "second column is zero or parallel to the first",
        ));
    }
    let c1 = b_perp / nb;
    let c2 = c0.cross(&c1);
    Ok(Matrix3::from_columns(&[c0, c1, c2]))
}

/// Measures how far `m` is from SO(3): `(max |MᵀM − I|, det M)`.
pub fn orthonormality(m: &RotMatrix) -> (f64, f64) {
    let residual = (m.transpose() * m - Matrix3::identity()).abs().max();
    (residual, m.determinant())
}

pub fn validate_rotation(m: &RotMatrix) -> Result<(), RotationError> {
    let (residual, det) = orthonormality(m);
    if !residual.is_finite() || residual > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(RotationError::NotARotation { residual, det });
    }
    Ok(())
}

pub fn matrix_to_rot6d(m: &RotMatrix) -> Result<Rot6D, RotationError> {
    validate_rotation(m)?;
    Ok(Rot6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]))
}

/// Angle of the relative rotation `aᵀb`, in radians, within `[0, π]`.
pub fn geodesic_angle(a: &RotMatrix, b: &RotMatrix) -> f64 {
    // tr(aᵀb) = Σ a_ij b_ij, which is symmetric in (a, b) bit-for-bit.
    let trace: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let r = a.transpose() * b;
    let sin2 = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    (0.5 * sin2).atan2(0.5 * (trace - 1.0))
}

pub fn rot_x(angle: f64) -> RotMatrix {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> RotMatrix {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> RotMatrix {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rodrigues' formula for a rotation vector (axis × angle).
pub fn axis_angle(rotvec: &Vector3<f64>) -> RotMatrix {
    let angle = rotvec.norm();
    if angle < 1e-12 {
        return Matrix3::identity();
    }
    let k = rotvec / angle;
    let kx = k.cross_matrix();
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}
