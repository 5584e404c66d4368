//! Initial motion estimator: tracker and history embeddings, a pre-norm
//! transformer encoder, and pose / uncertainty heads.

use candle_core::{DType, Result, Tensor, D};
use candle_nn::{Linear, Module, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::nn::{apply, sinusoidal_encoding, softmax_last, softplus, LayerNorm, Mlp};
use scenepose_core::{OBS_DIM, POSE_DIM};

/// Floor added to every predicted standard deviation.
pub const DELTA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyLoss {
    /// `‖r ⊘ δ‖₂ + log ‖δ‖₂` over the whole window.
    Literal,
    /// Mean per-element Gaussian negative log-likelihood.
    GaussianNll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub obs_dim: usize,
    pub pose_dim: usize,
    pub uncertainty_loss: UncertaintyLoss,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            d_model: 256,
            layers: 3,
            heads: 8,
            ff_mult: 4,
            obs_dim: OBS_DIM,
            pose_dim: POSE_DIM,
            uncertainty_loss: UncertaintyLoss::Literal,
        }
    }
}

struct SelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            wq: candle_nn::linear(d, d, vb.pp("wq"))?,
            wk: candle_nn::linear(d, d, vb.pp("wk"))?,
            wv: candle_nn::linear(d, d, vb.pp("wv"))?,
            wo: candle_nn::linear(d, d, vb.pp("wo"))?,
            heads,
        })
    }

    /// Output `(B, T, D)` and attention weights `(B, H, T, T)`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split(apply(&self.wq, x)?)?;
        let k = split(apply(&self.wk, x)?)?;
        let v = split(apply(&self.wv, x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        Ok((apply(&self.wo, &ctx)?, attn))
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff: Mlp,
}

impl EncoderLayer {
    fn new(cfg: &Stage1Config, vb: VarBuilder) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(d, vb.pp("ln1"))?,
            attn: SelfAttention::new(d, cfg.heads, vb.pp("attn"))?,
            ln2: LayerNorm::new(d, vb.pp("ln2"))?,
            ff: Mlp::new(d, cfg.ff_mult * d, d, vb.pp("ff"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, w) = self.attn.forward(&self.ln1.forward(x)?)?;
        let x = (x + a)?;
        let f = apply(&self.ff, &self.ln2.forward(&x)?)?;
        Ok(((x + f)?, w))
    }
}

pub struct Stage1 {
    pub config: Stage1Config,
    obs_embed: Linear,
    hist_embed: Linear,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    pose_head: Mlp,
    unc_head: Mlp,
}

/// Mean pose `θ̃` and per-channel standard deviation `δ`, both `(B, T, 132)`.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub theta_mean: Tensor,
    pub delta: Tensor,
}

/// Variable-name prefix of the uncertainty head inside a stage-1 builder.
pub const UNCERTAINTY_HEAD: &str = "unc_head";

impl Stage1 {
    pub fn new(config: Stage1Config, vb: VarBuilder) -> Result<Self> {
        if config.d_model % config.heads != 0 || config.d_model % 2 != 0 {
            candle_core::bail!(
                "model width {} must be even and divisible by {} heads",
                config.d_model,
                config.heads
            );
        }
        let half = config.d_model / 2;
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&config, vb.pp(format!("layer{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            obs_embed: candle_nn::linear(config.obs_dim, half, vb.pp("obs_embed"))?,
            hist_embed: candle_nn::linear(config.pose_dim, half, vb.pp("hist_embed"))?,
            layers,
            final_norm: LayerNorm::new(config.d_model, vb.pp("final_norm"))?,
            pose_head: Mlp::new(config.d_model, config.d_model, config.pose_dim, vb.pp("pose_head"))?,
            unc_head: Mlp::new(config.d_model, config.d_model, config.pose_dim, vb.pp(UNCERTAINTY_HEAD))?,
            config,
        })
    }

    /// `(B, T, 36)` observations and `(B, T, 132)` history → `(B, T, D)`.
    pub fn embed_inputs(&self, x: &Tensor, x_hm: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let (b2, t2, c2) = x_hm.dims3()?;
        if c != self.config.obs_dim || c2 != self.config.pose_dim || b != b2 || t != t2 {
            candle_core::bail!("embed_inputs: shapes {:?} and {:?}", x.dims(), x_hm.dims());
        }
        Tensor::cat(&[apply(&self.obs_embed, x)?, apply(&self.hist_embed, x_hm)?], D::Minus1)
    }

    pub fn encode(&self, z_s: &Tensor) -> Result<Tensor> {
        Ok(self.encode_with_attention(z_s)?.0)
    }

    /// Encoder output together with each layer's attention weights.
    pub fn encode_with_attention(&self, z_s: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (_, t, d) = z_s.dims3()?;
        if d != self.config.d_model {
            candle_core::bail!("encode: width {d}, expected {}", self.config.d_model);
        }
        let pe = sinusoidal_encoding(t, d, z_s.dtype(), z_s.device())?;
        let mut h = z_s.broadcast_add(&pe)?;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w) = layer.forward(&h)?;
            h = next;
            weights.push(w);
        }
        Ok((self.final_norm.forward(&h)?, weights))
    }

    pub fn regress_pose(&self, z_h: &Tensor) -> Result<Tensor> {
        apply(&self.pose_head, z_h)
    }

    pub fn regress_uncertainty(&self, z_h: &Tensor) -> Result<Tensor> {
        uncertainty_from_raw(&apply(&self.unc_head, z_h)?)
    }

    pub fn forward(&self, x: &Tensor, x_hm: &Tensor) -> Result<Stage1Output> {
        let z_h = self.encode(&self.embed_inputs(x, x_hm)?)?;
        Ok(Stage1Output {
            theta_mean: self.regress_pose(&z_h)?,
            delta: self.regress_uncertainty(&z_h)?,
        })
    }
}

/// `softplus(raw) + δ_min`.
pub fn uncertainty_from_raw(raw: &Tensor) -> Result<Tensor> {
    softplus(raw)? + DELTA_MIN
}

/// `θ̄ = θ̃ + δ ⊙ ε`.
pub fn sample_pose(theta_mean: &Tensor, delta: &Tensor, epsilon: &Tensor) -> Result<Tensor> {
    if theta_mean.dims() != delta.dims() || delta.dims() != epsilon.dims() {
        candle_core::bail!("sample_pose: shape mismatch");
    }
    theta_mean + (delta * epsilon)?
}

#[derive(Debug, Clone)]
pub struct Stage1Losses {
    pub l_m: Tensor,
    pub l_delta: Tensor,
    pub total: Tensor,
}

/// Euclidean norm of each batch item over all remaining axes, `(B,)`.
pub fn window_norm(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    x.reshape((b, ()))?.sqr()?.sum(1)?.sqrt()
}

/// Motion loss, uncertainty loss and their weighted sum, averaged over the
/// batch axis of `(B, T, C)` inputs.
pub fn loss_stage1(
    theta_mean: &Tensor,
    delta: &Tensor,
    theta_gt: &Tensor,
    lambda_m: f64,
    lambda_delta: f64,
    kind: UncertaintyLoss,
) -> Result<Stage1Losses> {
    if theta_mean.dims() != theta_gt.dims() || delta.dims() != theta_gt.dims() {
        candle_core::bail!("loss_stage1: shape mismatch");
    }
    let min = delta.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(min > 0.0) {
        candle_core::bail!("loss_stage1: uncertainty must be strictly positive, min {min}");
    }
    let r = (theta_mean - theta_gt)?;
    let l_m = window_norm(&r)?.mean(0)?;
    let l_delta = match kind {
        UncertaintyLoss::Literal => {
            (window_norm(&(&r / delta)?)? + window_norm(delta)?.log()?)?.mean(0)?
        }
        UncertaintyLoss::GaussianNll => {
            let z = (&r / delta)?.sqr()?;
            ((z * 0.5)? + delta.log()?)?.mean_all()?
        }
    };
    let total = ((&l_m * lambda_m)? + (&l_delta * lambda_delta)?)?;
    Ok(Stage1Losses { l_m, l_delta, total })
}

/// History poses for a window starting at `start`: rows `start − shift ..
/// start − shift + frames` of `poses` (row-major, `width` per frame), with
/// frames before the sequence filled by `rest`.
pub fn history_window(poses: &[f64], width: usize, start: usize, frames: usize, shift: usize, rest: &[f64]) -> Vec<f64> {
    assert_eq!(rest.len(), width);
    let available = poses.len() / width;
    let mut out = Vec::with_capacity(frames * width);
    for k in 0..frames {
        let idx = (start + k) as isize - shift as isize;
        if idx < 0 || idx as usize >= available {
            out.extend_from_slice(rest);
        } else {
            let i = idx as usize;
            out.extend_from_slice(&poses[i * width..(i + 1) * width]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_shift_and_rest_fill() {
        let poses: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(history_window(&poses, 1, 0, 3, 1, &[-1.0]), vec![-1.0, 0.0, 1.0]);
        assert_eq!(history_window(&poses, 1, 3, 3, 3, &[-1.0]), vec![0.0, 1.0, 2.0]);
        assert_eq!(history_window(&poses, 1, 0, 2, 2, &[-1.0]), vec![-1.0, -1.0]);
    }
}
