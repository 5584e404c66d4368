//! Environment-aware refiner: point-set encoder, motion embedding, salience
//! cross-attention, fusion, contact head and pose decoder.

use candle_core::{DType, Device, Result, Tensor, D};
use candle_nn::{Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::grouping::{Hierarchy, HierarchyConfig};
use crate::nn::{apply, max_pool, sigmoid, softmax_last, Mlp};
use scenepose_core::{CROP_POINTS, EXT_OBS_DIM, NUM_JOINTS, POSE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvEncoderKind {
    Hierarchical,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalienceMode {
    /// `(softmax(QKᵀ/√d) + s) V`, rows not renormalized.
    PostSoftmax,
    /// `softmax(QKᵀ/√d + s) V`.
    PreSoftmaxBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub d_model: usize,
    pub env_dim: usize,
    pub attn_dim: usize,
    pub pose_dim: usize,
    pub ext_obs_dim: usize,
    pub n_joints: usize,
    pub crop_points: usize,
    pub encoder: EnvEncoderKind,
    pub flat_width: usize,
    pub hierarchy: HierarchyConfig,
    pub salience: SalienceMode,
    pub salience_hidden: usize,
    /// Decoder output is added to the sampled hypothesis.
    pub residual: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            d_model: 256,
            env_dim: 256,
            attn_dim: 256,
            pose_dim: POSE_DIM,
            ext_obs_dim: EXT_OBS_DIM,
            n_joints: NUM_JOINTS,
            crop_points: CROP_POINTS,
            encoder: EnvEncoderKind::Hierarchical,
            flat_width: 64,
            hierarchy: HierarchyConfig::default(),
            salience: SalienceMode::PostSoftmax,
            salience_hidden: 32,
            residual: true,
        }
    }
}

impl Stage2Config {
    /// Width of the motion concatenation: pose + head translation + extended
    /// observation.
    pub fn motion_concat_dim(&self) -> usize {
        self.pose_dim + 3 + self.ext_obs_dim
    }
}

/// Environment crop batch: `(B, N, 3)` points plus grouping for the
/// hierarchical encoder.
pub struct EnvBatch {
    pub points: Tensor,
    pub hierarchies: Vec<Hierarchy>,
}

struct FlatEncoder {
    local: Mlp,
    head: Mlp,
}

struct HierEncoder {
    sa1: Mlp,
    sa2: Mlp,
    up2: Mlp,
    up1: Mlp,
}

enum EnvEncoder {
    Flat(FlatEncoder),
    Hier(HierEncoder),
}

fn index_tensor(idx: impl Iterator<Item = usize>, device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.map(|i| i as u32).collect();
    let n = v.len();
    Tensor::from_vec(v, n, device)
}

fn weights_tensor(w: Vec<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = w.len();
    Tensor::from_vec(w, (n, 1), device)?.to_dtype(dtype)
}

impl HierEncoder {
    fn forward(&self, env: &EnvBatch, cfg: &Stage2Config) -> Result<Tensor> {
        let (b, n, _) = env.points.dims3()?;
        if env.hierarchies.len() != b {
            candle_core::bail!("need one grouping per crop, got {} for {b}", env.hierarchies.len());
        }
        let h = &cfg.hierarchy;
        let dev = env.points.device();
        let dtype = env.points.dtype();
        let hs = &env.hierarchies;
        let c1 = hs[0].centers1.len();
        let c2 = hs[0].centers2.len();
        if hs.iter().any(|g| g.n_points != n || g.centers1.len() != c1 || g.centers2.len() != c2) {
            candle_core::bail!("inconsistent groupings in batch");
        }
        let pts = env.points.reshape((b * n, 3))?;

        // Level 1: local patches around sampled centers.
        let centers1 = index_tensor(hs.iter().enumerate().flat_map(|(k, g)| g.centers1.iter().map(move |&i| k * n + i)), dev)?;
        let groups1 = index_tensor(hs.iter().enumerate().flat_map(|(k, g)| g.groups1.iter().map(move |&i| k * n + i)), dev)?;
        let xyz1 = pts.index_select(&centers1, 0)?;
        let rel1 = pts
            .index_select(&groups1, 0)?
            .reshape((b * c1, h.neighbors1, 3))?
            .broadcast_sub(&xyz1.unsqueeze(1)?)?;
        let f1 = max_pool(&apply(&self.sa1, &rel1)?.relu()?, 1)?;

        // Level 2 over level-1 centers.
        let centers2 = index_tensor(hs.iter().enumerate().flat_map(|(k, g)| g.centers2.iter().map(move |&i| k * c1 + i)), dev)?;
        let groups2 = index_tensor(hs.iter().enumerate().flat_map(|(k, g)| g.groups2.iter().map(move |&i| k * c1 + i)), dev)?;
        let xyz2 = xyz1.index_select(&centers2, 0)?;
        let rel2 = xyz1
            .index_select(&groups2, 0)?
            .reshape((b * c2, h.neighbors2, 3))?
            .broadcast_sub(&xyz2.unsqueeze(1)?)?;
        let feat2 = f1.index_select(&groups2, 0)?.reshape((b * c2, h.neighbors2, h.width1))?;
        let f2 = max_pool(&apply(&self.sa2, &Tensor::cat(&[rel2, feat2], D::Minus1)?)?.relu()?, 1)?;

        // Propagate back: level 2 → level 1 → all points.
        let up2_idx = index_tensor(hs.iter().enumerate().flat_map(|(k, g)| g.up2_idx.iter().map(move |&i| k * c2 + i)), dev)?;
        let up2_w = weights_tensor(hs.iter().flat_map(|g| g.up2_w.iter().copied()).collect(), dtype, dev)?;
        let interp2 = f2
            .index_select(&up2_idx, 0)?
            .broadcast_mul(&up2_w)?
            .reshape((b * c1, 3, h.width2))?
            .sum(1)?;
        let g1 = apply(&self.up2, &Tensor::cat(&[interp2, f1], D::Minus1)?)?.relu()?;
        let up1_idx = index_tensor(hs.iter().enumerate().flat_map(|(k, g)| g.up1_idx.iter().map(move |&i| k * c1 + i)), dev)?;
        let up1_w = weights_tensor(hs.iter().flat_map(|g| g.up1_w.iter().copied()).collect(), dtype, dev)?;
        let interp1 = g1
            .index_select(&up1_idx, 0)?
            .broadcast_mul(&up1_w)?
            .reshape((b * n, 3, h.width2))?
            .sum(1)?;
        let tokens = apply(&self.up1, &Tensor::cat(&[interp1, pts], D::Minus1)?)?;
        tokens.reshape((b, n, cfg.env_dim))
    }
}

pub struct Stage2 {
    pub config: Stage2Config,
    env: EnvEncoder,
    motion_embed: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    salience: Mlp,
    fuse: Mlp,
    contact: Mlp,
    decoder: Mlp,
}

/// Ablation switches applied at forward time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage2Switches {
    /// When off, the motion-environment representation is replaced by zeros.
    pub env_semantic: bool,
    /// When off, the decoder receives zeros instead of contact probabilities.
    pub contact_head: bool,
}

impl Default for Stage2Switches {
    fn default() -> Self {
        Self {
            env_semantic: true,
            contact_head: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub theta_final: Tensor,
    pub contact_logits: Tensor,
    pub contact_probs: Tensor,
}

impl Stage2 {
    pub fn new(config: Stage2Config, vb: VarBuilder) -> Result<Self> {
        let env = match config.encoder {
            EnvEncoderKind::Flat => {
                let w = config.flat_width;
                EnvEncoder::Flat(FlatEncoder {
                    local: Mlp::new(3, w, w, vb.pp("env.local"))?,
                    head: Mlp::new(2 * w, config.env_dim, config.env_dim, vb.pp("env.head"))?,
                })
            }
            EnvEncoderKind::Hierarchical => {
                let h = &config.hierarchy;
                EnvEncoder::Hier(HierEncoder {
                    sa1: Mlp::new(3, h.width1, h.width1, vb.pp("env.sa1"))?,
                    sa2: Mlp::new(3 + h.width1, h.width2, h.width2, vb.pp("env.sa2"))?,
                    up2: Mlp::new(h.width1 + h.width2, h.width2, h.width2, vb.pp("env.up2"))?,
                    up1: Mlp::new(h.width2 + 3, config.env_dim, config.env_dim, vb.pp("env.up1"))?,
                })
            }
        };
        let d = config.d_model;
        let a = config.attn_dim;
        Ok(Self {
            env,
            motion_embed: candle_nn::linear(config.motion_concat_dim(), d, vb.pp("motion_embed"))?,
            wq: candle_nn::linear_no_bias(d, a, vb.pp("wq"))?,
            wk: candle_nn::linear_no_bias(config.env_dim, a, vb.pp("wk"))?,
            wv: candle_nn::linear_no_bias(config.env_dim, d, vb.pp("wv"))?,
            // Starts as plain cross-attention.
            salience: Mlp::new_zero_output(4, config.salience_hidden, 1, vb.pp("salience"))?,
            fuse: Mlp::new(2 * d, d, d, vb.pp("fuse"))?,
            contact: Mlp::new(config.ext_obs_dim + d, d, config.n_joints, vb.pp("contact"))?,
            decoder: Mlp::new(d + config.n_joints, d, config.pose_dim, vb.pp("decoder"))?,
            config,
        })
    }

    /// Per-point tokens `(B, N, env_dim)`.
    pub fn encode_environment(&self, env: &EnvBatch) -> Result<Tensor> {
        let (_, n, c) = env.points.dims3()?;
        if n != self.config.crop_points || c != 3 {
            candle_core::bail!("environment crop has {n} points of width {c}, expected {} × 3", self.config.crop_points);
        }
        match &self.env {
            EnvEncoder::Flat(f) => {
                let local = apply(&f.local, &env.points)?.relu()?;
                let global = max_pool(&local, 1)?.unsqueeze(1)?.broadcast_as(local.shape())?;
                apply(&f.head, &Tensor::cat(&[local, global], D::Minus1)?)
            }
            EnvEncoder::Hier(h) => h.forward(env, &self.config),
        }
    }

    /// `(B, T, 132)`, `(B, T, 3)`, `(B, T, 40)` → `(B, T, D)`.
    pub fn embed_motion(&self, theta_sample: &Tensor, head_translation: &Tensor, x_new: &Tensor) -> Result<Tensor> {
        let cat = Tensor::cat(&[theta_sample, head_translation, x_new], D::Minus1)?;
        if cat.dim(D::Minus1)? != self.config.motion_concat_dim() {
            candle_core::bail!("motion concat width {}", cat.dim(D::Minus1)?);
        }
        apply(&self.motion_embed, &cat)
    }

    /// Per-point scalar `(B, N)` from raw salience features `(B, N, 4)`.
    pub fn salience_scores(&self, salience_raw: &Tensor) -> Result<Tensor> {
        apply(&self.salience, salience_raw)?.squeeze(D::Minus1)
    }

    /// Softmax attention weights `(B, T, N)` before any salience term.
    pub fn attention_weights(&self, z_m: &Tensor, env: &Tensor) -> Result<Tensor> {
        softmax_last(&self.attention_logits(z_m, env)?)
    }

    fn attention_logits(&self, z_m: &Tensor, env: &Tensor) -> Result<Tensor> {
        let q = apply(&self.wq, z_m)?;
        let k = apply(&self.wk, env)?;
        q.matmul(&k.t()?.contiguous()?)? / (self.config.attn_dim as f64).sqrt()
    }

    pub fn cross_attend(&self, z_m: &Tensor, env: &Tensor, salience_raw: &Tensor) -> Result<Tensor> {
        let v = apply(&self.wv, env)?;
        let s = self.salience_scores(salience_raw)?.unsqueeze(1)?;
        let weights = match self.config.salience {
            SalienceMode::PostSoftmax => self.attention_weights(z_m, env)?.broadcast_add(&s)?,
            SalienceMode::PreSoftmaxBias => softmax_last(&self.attention_logits(z_m, env)?.broadcast_add(&s)?)?,
        };
        weights.matmul(&v)
    }

    pub fn fuse(&self, z_me: &Tensor, z_m: &Tensor) -> Result<Tensor> {
        apply(&self.fuse, &Tensor::cat(&[z_me, z_m], D::Minus1)?)
    }

    /// Contact probabilities and the logits behind them, `(B, T, 22)`.
    pub fn predict_contact(&self, x_new: &Tensor, z_rm: &Tensor) -> Result<(Tensor, Tensor)> {
        let logits = apply(&self.contact, &Tensor::cat(&[x_new, z_rm], D::Minus1)?)?;
        Ok((sigmoid(&logits)?, logits))
    }

    pub fn decode_pose(&self, z_rm: &Tensor, c_hat: &Tensor) -> Result<Tensor> {
        apply(&self.decoder, &Tensor::cat(&[z_rm, c_hat], D::Minus1)?)
    }

    pub fn forward(
        &self,
        theta_sample: &Tensor,
        head_translation: &Tensor,
        x_new: &Tensor,
        env: &EnvBatch,
        salience_raw: &Tensor,
        switches: Stage2Switches,
    ) -> Result<Stage2Output> {
        let z_m = self.embed_motion(theta_sample, head_translation, x_new)?;
        let z_me = if switches.env_semantic {
            let tokens = self.encode_environment(env)?;
            self.cross_attend(&z_m, &tokens, salience_raw)?
        } else {
            z_m.zeros_like()?
        };
        let z_rm = self.fuse(&z_me, &z_m)?;
        let (probs, logits) = self.predict_contact(x_new, &z_rm)?;
        let c_in = if switches.contact_head { probs.clone() } else { probs.zeros_like()? };
        let decoded = self.decode_pose(&z_rm, &c_in)?;
        let theta_final = if self.config.residual {
            (theta_sample + decoded)?
        } else {
            decoded
        };
        Ok(Stage2Output {
            theta_final,
            contact_logits: logits,
            contact_probs: probs,
        })
    }
}
