//! Stage-II supervision, contact, foot-ground, kinematic-chain and collision
//! losses, and their weighted total.
//!
//! Every term takes batched tensors (`B` windows first) and averages its
//! per-window value over the batch.

use candle_core::{DType, Device, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::sigmoid;
use crate::stage1::window_norm;
use scenepose_core::skeleton::{KinematicTree, FEET, HANDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_delta: f64,
    pub posi: f64,
    pub hal: f64,
    pub fc: f64,
    pub contact: f64,
    pub gfh: f64,
    pub gp: f64,
    pub coap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 1.0,
            lambda_delta: 0.001,
            posi: 2.0,
            hal: 1.0,
            fc: 0.75,
            contact: 0.75,
            gfh: 0.75,
            gp: 1.0,
            coap: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [
            ("lambda_m", self.lambda_m),
            ("lambda_delta", self.lambda_delta),
            ("posi", self.posi),
            ("hal", self.hal),
            ("fc", self.fc),
            ("contact", self.contact),
            ("gfh", self.gfh),
            ("gp", self.gp),
            ("coap", self.coap),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("loss weight {name} must be finite and ≥ 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundHeightMode {
    /// Only frames where the ground truth marks the foot joint in contact.
    ContactMasked,
    /// Every frame and foot joint.
    AllFrames,
}

fn scalar(v: f64, device: &Device, dtype: DType) -> Result<Tensor> {
    Tensor::new(v, device)?.to_dtype(dtype)
}

/// Euclidean norm of the pose difference over each window.
pub fn final_motion_loss(theta_final: &Tensor, theta_gt: &Tensor) -> Result<Tensor> {
    if theta_final.dims() != theta_gt.dims() {
        candle_core::bail!("final_motion_loss: shape mismatch");
    }
    window_norm(&(theta_final - theta_gt)?)?.mean(0)
}

fn select_joints(x: &Tensor, joints: &[usize]) -> Result<Tensor> {
    let idx = Tensor::from_vec(joints.iter().map(|&j| j as u32).collect::<Vec<_>>(), joints.len(), x.device())?;
    x.index_select(&idx, 2)
}

/// Global position error (L2 over all joints) and hand error (L1 over the
/// wrists), for `(B, T, J, 3)` positions.
pub fn position_losses(pred: &Tensor, gt: &Tensor) -> Result<(Tensor, Tensor)> {
    if pred.dims() != gt.dims() {
        candle_core::bail!("position_losses: shape mismatch");
    }
    let diff = (pred - gt)?;
    let posi = window_norm(&diff)?.mean(0)?;
    let b = pred.dim(0)?;
    let hal = select_joints(&diff, &HANDS)?.abs()?.reshape((b, ()))?.sum(1)?.mean(0)?;
    Ok((posi, hal))
}

/// Foot contact, foot ground height and ground penetration terms.
///
/// `contacts` is `(B, T, J)` with 0/1 entries; `z_ground` holds one floor
/// height per window.
pub fn foot_losses(
    pred: &Tensor,
    gt: &Tensor,
    contacts: &Tensor,
    z_ground: &[f64],
    mode: GroundHeightMode,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, t, _, _) = pred.dims4()?;
    if pred.dims() != gt.dims() || z_ground.len() != b {
        candle_core::bail!("foot_losses: shape mismatch");
    }
    let dev = pred.device();
    let dtype = pred.dtype();
    let zg = Tensor::from_vec(z_ground.to_vec(), (b, 1, 1), dev)?.to_dtype(dtype)?;
    let c = select_joints(contacts, &FEET)?.to_dtype(dtype)?;
    let count = c.reshape((b, ()))?.sum(1)?.maximum(1.0)?;
    let pf = select_joints(pred, &FEET)?;
    let gf = select_joints(gt, &FEET)?;
    let fc_sum = (pf - gf)?.abs()?.broadcast_mul(&c.unsqueeze(3)?)?.reshape((b, ()))?.sum(1)?;
    let fc = (fc_sum / &count)?.mean(0)?;
    let height = select_joints(pred, &FEET)?.narrow(3, 2, 1)?.squeeze(3)?;
    let above = height.broadcast_sub(&zg)?.abs()?;
    let gfh = match mode {
        GroundHeightMode::ContactMasked => ((above * &c)?.reshape((b, ()))?.sum(1)? / &count)?.mean(0)?,
        GroundHeightMode::AllFrames => above.reshape((b, ()))?.mean(1)?.mean(0)?,
    };
    // relu(z_ground − min_j z_j) = max_j relu(z_ground − z_j)
    let z = pred.narrow(3, 2, 1)?.squeeze(3)?;
    let below = zg.broadcast_sub(&z)?.relu()?.max(2)?;
    let gp = (below.sum(1)? / t as f64)?.mean(0)?;
    Ok((fc, gfh, gp))
}

/// Mean binary cross-entropy of probabilities against 0/1 targets.
pub fn contact_loss(c_hat: &Tensor, c_gt: &Tensor) -> Result<Tensor> {
    let p = c_hat.clamp(1e-7, 1.0 - 1e-7)?;
    let c = c_gt.to_dtype(p.dtype())?;
    let pos = (&c * p.log()?)?;
    let neg = ((c.ones_like()? - &c)? * (p.ones_like()? - &p)?.log()?)?;
    (pos + neg)?.neg()?.mean_all()
}

/// The same cross-entropy computed from logits without saturating.
pub fn contact_loss_logits(logits: &Tensor, c_gt: &Tensor) -> Result<Tensor> {
    let c = c_gt.to_dtype(logits.dtype())?;
    // log σ(x) = −softplus(−x), log(1 − σ(x)) = −softplus(x)
    let sp_pos = crate::nn::softplus(logits)?;
    let sp_neg = crate::nn::softplus(&logits.neg()?)?;
    ((&c * sp_neg)? + ((c.ones_like()? - &c)? * sp_pos)?)?.mean_all()
}

/// Environment points near the body for one window, ground removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionCrop {
    pub points: Vec<[f32; 3]>,
    /// A placeholder crop (nothing but ground in range) contributes zero.
    pub synthetic: bool,
}

struct ActivePair {
    point: [f64; 3],
    a: usize,
    b: usize,
    radius: f64,
}

/// Indices of interior (frame, point) pairs and the capsule reaching the
/// highest occupancy there, found on detached positions.
fn active_pairs(pos: &[f64], b: usize, t: usize, j: usize, crops: &[CollisionCrop], tree: &KinematicTree) -> Vec<(usize, ActivePair)> {
    let bones: Vec<(usize, usize, f64)> = tree.bones().map(|(p, c)| (p, c, tree.radius(c))).collect();
    let rmax = bones.iter().map(|x| x.2).fold(0.0, f64::max);
    let mut out = Vec::new();
    for bi in 0..b {
        let crop = &crops[bi];
        if crop.synthetic || crop.points.is_empty() {
            continue;
        }
        for ti in 0..t {
            let base = (bi * t + ti) * j;
            let p = |k: usize| [pos[(base + k) * 3], pos[(base + k) * 3 + 1], pos[(base + k) * 3 + 2]];
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for k in 0..j {
                let q = p(k);
                for c in 0..3 {
                    lo[c] = lo[c].min(q[c] - rmax);
                    hi[c] = hi[c].max(q[c] + rmax);
                }
            }
            for pt in &crop.points {
                let x = [pt[0] as f64, pt[1] as f64, pt[2] as f64];
                if (0..3).any(|c| x[c] < lo[c] || x[c] > hi[c]) {
                    continue;
                }
                let mut best: Option<(f64, usize, usize, f64)> = None;
                for &(pa, pb, r) in &bones {
                    let d = segment_distance(&x, &p(pa), &p(pb));
                    let f = (r - d) / r;
                    if best.map_or(true, |bst| f > bst.0) {
                        best = Some((f, pa, pb, r));
                    }
                }
                if let Some((f, pa, pb, r)) = best {
                    if f > 0.0 {
                        out.push((
                            bi,
                            ActivePair {
                                point: x,
                                a: base + pa,
                                b: base + pb,
                                radius: r,
                            },
                        ));
                    }
                }
            }
        }
    }
    out
}

fn segment_distance(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let s = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    };
    (0..3).map(|c| (ap[c] - s * ab[c]).powi(2)).sum::<f64>().sqrt()
}

/// Mean over frames of `(1/N) Σ_i σ(f(p_i))·1[f(p_i) > 0]`, averaged over
/// the batch, for `(B, T, J, 3)` joint positions and one crop per window.
pub fn collision_loss(positions: &Tensor, crops: &[CollisionCrop], tree: &KinematicTree) -> Result<Tensor> {
    let (b, t, j, _) = positions.dims4()?;
    if crops.len() != b || j != tree.len() {
        candle_core::bail!("collision_loss: {} crops for {b} windows, {j} joints", crops.len());
    }
    let dev = positions.device();
    let dtype = positions.dtype();
    let flat = positions.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let pairs = active_pairs(&flat, b, t, j, crops, tree);
    if pairs.is_empty() {
        return scalar(0.0, dev, dtype);
    }
    let n = pairs.len();
    let ia = Tensor::from_vec(pairs.iter().map(|(_, p)| p.a as u32).collect::<Vec<_>>(), n, dev)?;
    let ib = Tensor::from_vec(pairs.iter().map(|(_, p)| p.b as u32).collect::<Vec<_>>(), n, dev)?;
    let pts = Tensor::from_vec(pairs.iter().flat_map(|(_, p)| p.point).collect::<Vec<_>>(), (n, 3), dev)?.to_dtype(dtype)?;
    let radii = Tensor::from_vec(pairs.iter().map(|(_, p)| p.radius).collect::<Vec<_>>(), n, dev)?.to_dtype(dtype)?;
    // Per-pair normalizer 1 / (N_S · T · B).
    let norm = Tensor::from_vec(
        pairs
            .iter()
            .map(|(bi, _)| 1.0 / (crops[*bi].points.len() as f64 * t as f64 * b as f64))
            .collect::<Vec<_>>(),
        n,
        dev,
    )?
    .to_dtype(dtype)?;
    let all = positions.reshape((b * t * j, 3))?;
    let a = all.index_select(&ia, 0)?;
    let bb = all.index_select(&ib, 0)?;
    let ab = (&bb - &a)?;
    let ap = (&pts - &a)?;
    let len2 = (ab.sqr()?.sum(1)? + 1e-12)?;
    let s = ((&ap * &ab)?.sum(1)? / len2)?.clamp(0.0, 1.0)?;
    let closest = (&a + ab.broadcast_mul(&s.unsqueeze(1)?)?)?;
    let d = (&pts - closest)?.sqr()?.sum(1)?.sqrt()?;
    let f = ((&radii - d)? / &radii)?;
    (sigmoid(&f)? * norm)?.sum_all()
}

/// Individual terms of the Stage-II objective, each a scalar tensor.
#[derive(Debug, Clone)]
pub struct Stage2Terms {
    pub l_si: Tensor,
    pub l_m_final: Tensor,
    pub posi: Tensor,
    pub hal: Tensor,
    pub fc: Tensor,
    pub contact: Tensor,
    pub gfh: Tensor,
    pub gp: Tensor,
    pub coap: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_si: f64,
    pub l_m_final: f64,
    pub posi: f64,
    pub hal: f64,
    pub fc: f64,
    pub contact: f64,
    pub gfh: f64,
    pub gp: f64,
    pub coap: f64,
    pub total: f64,
}

impl LossReport {
    /// The weighted sum recomputed from the stored terms.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.l_si
            + self.l_m_final
            + w.posi * self.posi
            + w.hal * self.hal
            + w.fc * self.fc
            + w.contact * self.contact
            + w.gfh * self.gfh
            + w.gp * self.gp
            + w.coap * self.coap
    }

    pub fn entries(&self) -> [(&'static str, f64); 10] {
        [
            ("l_si", self.l_si),
            ("l_m_final", self.l_m_final),
            ("posi", self.posi),
            ("hal", self.hal),
            ("fc", self.fc),
            ("contact", self.contact),
            ("gfh", self.gfh),
            ("gp", self.gp),
            ("coap", self.coap),
            ("total", self.total),
        ]
    }
}

fn value(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

/// `L_SI + L_M' + Σ λ_i · term_i` and the per-term report.
pub fn total_stage2(terms: &Stage2Terms, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let weighted = [
        (&terms.posi, w.posi),
        (&terms.hal, w.hal),
        (&terms.fc, w.fc),
        (&terms.contact, w.contact),
        (&terms.gfh, w.gfh),
        (&terms.gp, w.gp),
        (&terms.coap, w.coap),
    ];
    let mut total = (&terms.l_si + &terms.l_m_final)?;
    for (t, lambda) in weighted {
        total = (total + (t * lambda)?)?;
    }
    let report = LossReport {
        l_si: value(&terms.l_si)?,
        l_m_final: value(&terms.l_m_final)?,
        posi: value(&terms.posi)?,
        hal: value(&terms.hal)?,
        fc: value(&terms.fc)?,
        contact: value(&terms.contact)?,
        gfh: value(&terms.gfh)?,
        gp: value(&terms.gp)?,
        coap: value(&terms.coap)?,
        total: value(&total)?,
    };
    if !report.total.is_finite() {
        candle_core::bail!("non-finite stage-2 loss: {report:?}");
    }
    Ok((total, report))
}
