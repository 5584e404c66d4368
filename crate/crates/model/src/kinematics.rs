//! Tensor forward kinematics: 6D decode by Gram–Schmidt and chain composition,
//! differentiable with respect to the pose and root translation.

use candle_core::{DType, Device, Result, Tensor, D};
use scenepose_core::skeleton::KinematicTree;

/// Kinematic tree constants held as tensors.
#[derive(Debug, Clone)]
pub struct TreeTensors {
    parents: Vec<Option<usize>>,
    /// One `(3, 1)` rest offset per joint.
    offsets: Vec<Tensor>,
    radii: Vec<f64>,
}

impl TreeTensors {
    pub fn new(tree: &KinematicTree, dtype: DType, device: &Device) -> Result<Self> {
        let offsets = (0..tree.len())
            .map(|j| {
                let o = tree.offset(j);
                Tensor::from_vec(vec![o.x, o.y, o.z], (3, 1), device)?.to_dtype(dtype)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            parents: tree.parents().to_vec(),
            offsets,
            radii: tree.bone_radii().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn radius(&self, j: usize) -> f64 {
        self.radii[j]
    }
}

fn normalize(v: &Tensor) -> Result<Tensor> {
    v.broadcast_div(&v.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)
}

fn cross(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (a0, a1, a2) = (c(a, 0)?, c(a, 1)?, c(a, 2)?);
    let (b0, b1, b2) = (c(b, 0)?, c(b, 1)?, c(b, 2)?);
    Tensor::cat(
        &[
            ((&a1 * &b2)? - (&a2 * &b1)?)?,
            ((&a2 * &b0)? - (&a0 * &b2)?)?,
            ((&a0 * &b1)? - (&a1 * &b0)?)?,
        ],
        D::Minus1,
    )
}

/// `(..., 6)` → `(..., 3, 3)` with the 6 values read as the first two columns.
pub fn rot6d_to_matrix(x: &Tensor) -> Result<Tensor> {
    let a1 = x.narrow(D::Minus1, 0, 3)?;
    let a2 = x.narrow(D::Minus1, 3, 3)?;
    let b1 = normalize(&a1)?;
    let proj = (&b1 * &a2)?.sum_keepdim(D::Minus1)?;
    let b2 = normalize(&(a2 - b1.broadcast_mul(&proj)?)?)?;
    let b3 = cross(&b1, &b2)?;
    Tensor::stack(&[b1, b2, b3], D::Minus1)
}

/// Joint positions and global rotations for a `(B, T, 6J)` pose and
/// `(B, T, 3)` root translation: `(B, T, J, 3)` and `(B, T, J, 3, 3)`.
pub fn forward_kinematics(pose: &Tensor, root: &Tensor, tree: &TreeTensors) -> Result<(Tensor, Tensor)> {
    let (b, t, width) = pose.dims3()?;
    let j = tree.len();
    if width != 6 * j {
        candle_core::bail!("pose width {width} does not match {j} joints");
    }
    let local = rot6d_to_matrix(&pose.reshape((b * t, j, 6))?)?;
    let root = root.reshape((b * t, 3, 1))?;
    let mut globals: Vec<Tensor> = Vec::with_capacity(j);
    let mut positions: Vec<Tensor> = Vec::with_capacity(j);
    for k in 0..j {
        let lk = local.narrow(1, k, 1)?.squeeze(1)?;
        match tree.parent(k) {
            None => {
                globals.push(lk);
                positions.push(root.clone());
            }
            Some(p) => {
                let gp = &globals[p];
                let pos = (&positions[p] + gp.broadcast_matmul(&tree.offsets[k])?)?;
                positions.push(pos);
                globals.push(gp.matmul(&lk)?);
            }
        }
    }
    let pos = Tensor::stack(&positions, 1)?.reshape((b, t, j, 3))?;
    let glob = Tensor::stack(&globals, 1)?.reshape((b, t, j, 3, 3))?;
    Ok((pos, glob))
}

/// FK with the root placed so that joint `anchor` lands on `anchor_pos`
/// `(B, T, 3)` in every frame.
pub fn anchored_positions(pose: &Tensor, anchor: usize, anchor_pos: &Tensor, tree: &TreeTensors) -> Result<Tensor> {
    let (b, t, _) = pose.dims3()?;
    let zeros = Tensor::zeros((b, t, 3), pose.dtype(), pose.device())?;
    let (pos, _) = forward_kinematics(pose, &zeros, tree)?;
    let at = pos.narrow(2, anchor, 1)?;
    let shift = (anchor_pos.unsqueeze(2)? - at)?;
    pos.broadcast_add(&shift)
}
