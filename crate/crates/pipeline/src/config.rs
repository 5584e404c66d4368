//! Run configuration, read from TOML. Every field has a default, so a file
//! only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scenepose_core::environment::{CropShape, CROP_RADIUS};
use scenepose_core::WINDOW;
use scenepose_model::objectives::{GroundHeightMode, LossWeights};
use scenepose_model::stage1::Stage1Config;
use scenepose_model::stage2::Stage2Config;

use crate::error::{PipelineError, Result};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "SCENEPOSE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub window: usize,
    /// Frame step between consecutive training windows.
    pub train_stride: usize,
    /// Frames between a window and the history fed with it.
    pub history_shift: usize,
    /// Crop radius (circle) or half side (square), meters.
    pub crop_extent: f64,
    pub tracker_noise_pos: f64,
    pub tracker_noise_rot: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            window: WINDOW,
            train_stride: 10,
            history_shift: WINDOW,
            crop_extent: CROP_RADIUS,
            tracker_noise_pos: 0.0,
            tracker_noise_rot: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Stage I steps on the motion loss alone.
    pub stage1_motion_steps: usize,
    /// Stage I steps with the uncertainty term added.
    pub stage1_uncertainty_steps: usize,
    /// Stage II steps with Stage I frozen.
    pub stage2_frozen_steps: usize,
    /// Stage II steps with both stages trained jointly.
    pub stage2_joint_steps: usize,
    pub max_grad_norm: Option<f64>,
    pub cosine_decay: bool,
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            stage1_motion_steps: 2000,
            stage1_uncertainty_steps: 1000,
            stage2_frozen_steps: 2000,
            stage2_joint_steps: 1000,
            max_grad_norm: Some(1.0),
            cosine_decay: false,
            log_every: 50,
        }
    }
}

/// Ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub crop: CropShape,
    pub n_points: usize,
    /// Cross-attention over environment tokens.
    pub env_semantic: bool,
    /// Collision and foot-ground terms.
    pub env_geometry: bool,
    pub contact_head: bool,
    /// Uncertainty training and sampled hypotheses.
    pub uncertainty: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            crop: CropShape::Circle,
            n_points: scenepose_core::CROP_POINTS,
            env_semantic: true,
            env_geometry: true,
            contact_head: true,
            uncertainty: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub seed: u64,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub stage1_checkpoint: Option<PathBuf>,
    pub ground_height: GroundHeightMode,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            seed: 0,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("checkpoint.spck"),
            stage1_checkpoint: None,
            ground_height: GroundHeightMode::ContactMasked,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            variant: Variant::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(PipelineError::io(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| PipelineError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Stage II network configuration with the variant's crop size applied.
    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            crop_points: self.variant.n_points,
            ..self.model.stage2.clone()
        }
    }

    /// Loss weights after the variant switches are applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss.clone();
        if !self.variant.env_geometry {
            w.coap = 0.0;
            w.fc = 0.0;
            w.gfh = 0.0;
            w.gp = 0.0;
        }
        if !self.variant.contact_head {
            w.contact = 0.0;
        }
        if !self.variant.uncertainty {
            w.lambda_delta = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(PipelineError::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        positive("optim.lr", self.optim.lr)?;
        positive("data.crop_extent", self.data.crop_extent)?;
        if self.optim.batch_size == 0 {
            return Err(PipelineError::Config("optim.batch_size must be at least 1".into()));
        }
        if let Some(g) = self.optim.max_grad_norm {
            positive("optim.max_grad_norm", g)?;
        }
        if self.data.window < 4 || self.data.train_stride == 0 {
            return Err(PipelineError::Config("data.window must be ≥ 4 and data.train_stride ≥ 1".into()));
        }
        if self.data.history_shift == 0 {
            return Err(PipelineError::Config("data.history_shift must be at least 1".into()));
        }
        if self.data.tracker_noise_pos < 0.0 || self.data.tracker_noise_rot < 0.0 {
            return Err(PipelineError::Config("tracker noise must be ≥ 0".into()));
        }
        if self.variant.n_points == 0 {
            return Err(PipelineError::Config("variant.n_points must be at least 1".into()));
        }
        let s1 = &self.model.stage1;
        if s1.d_model == 0 || s1.heads == 0 || s1.d_model % s1.heads != 0 || s1.d_model % 2 != 0 {
            return Err(PipelineError::Config(format!(
                "model.stage1.d_model {} must be even and divisible by heads {}",
                s1.d_model, s1.heads
            )));
        }
        if s1.obs_dim != scenepose_core::OBS_DIM || s1.pose_dim != scenepose_core::POSE_DIM {
            return Err(PipelineError::Config("stage 1 input widths are fixed by the data layout".into()));
        }
        let s2 = &self.model.stage2;
        if s2.pose_dim != scenepose_core::POSE_DIM
            || s2.ext_obs_dim != scenepose_core::EXT_OBS_DIM
            || s2.n_joints != scenepose_core::NUM_JOINTS
        {
            return Err(PipelineError::Config("stage 2 input widths are fixed by the data layout".into()));
        }
        if s2.d_model == 0 || s2.env_dim == 0 || s2.attn_dim == 0 {
            return Err(PipelineError::Config("stage 2 widths must be positive".into()));
        }
        self.loss.validate().map_err(PipelineError::Config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_files() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("seed = 7\n[optim]\nlr = 0.01\n[variant]\ncrop = \"square\"\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.optim.lr, 0.01);
        assert_eq!(partial.variant.crop, CropShape::Square);
        assert_eq!(partial.optim.batch_size, 32);
    }

    #[test]
    fn rejects_bad_values() {
        for text in ["stage = 3", "[optim]\nlr = -1.0", "[loss]\ncoap = -0.1", "typo = 1", "[variant]\nn_points = 0"] {
            assert!(matches!(TrainConfig::from_toml(text), Err(PipelineError::Config(_))), "{text}");
        }
    }

    #[test]
    fn variant_switches_zero_weights() {
        let mut cfg = TrainConfig::default();
        cfg.variant.env_geometry = false;
        cfg.variant.contact_head = false;
        cfg.variant.uncertainty = false;
        let w = cfg.effective_weights();
        assert_eq!([w.coap, w.fc, w.gfh, w.gp, w.contact, w.lambda_delta], [0.0; 6]);
        assert_eq!((w.posi, w.hal), (2.0, 1.0));
    }
}
