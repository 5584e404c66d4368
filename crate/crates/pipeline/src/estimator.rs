//! Both stages under one variable map, batching of prepared windows, and
//! conversion to and from checkpoints.

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};

use scenepose_core::skeleton::{KinematicTree, HEAD};
use scenepose_core::{NUM_JOINTS, OBS_DIM, POSE_DIM};
use scenepose_model::grouping::build_hierarchy;
use scenepose_model::kinematics::{anchored_positions, TreeTensors};
use scenepose_model::nn::{named_vars, reinitialize, Adam};
use scenepose_model::objectives::CollisionCrop;
use scenepose_model::stage1::{Stage1, Stage1Output, UNCERTAINTY_HEAD};
use scenepose_model::stage2::{EnvBatch, EnvEncoderKind, Stage2, Stage2Output, Stage2Switches};

use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::config::TrainConfig;
use crate::error::{PipelineError, Result};
use crate::windows::Window;

pub const STAGE1_PREFIX: &str = "s1";
pub const STAGE2_PREFIX: &str = "s2";
pub const DTYPE: DType = DType::F32;

/// Stacked tensors for a list of windows of equal length.
pub struct Batch {
    pub x: Tensor,
    pub x_hm: Tensor,
    pub x_new: Tensor,
    pub head: Tensor,
    pub env: Option<EnvBatch>,
    pub salience: Option<Tensor>,
    pub theta_gt: Option<Tensor>,
    pub positions_gt: Option<Tensor>,
    pub contacts: Option<Tensor>,
    pub crops: Vec<CollisionCrop>,
    pub z_ground: Vec<f64>,
}

fn stack(rows: Vec<f64>, shape: &[usize], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(rows.into_iter().map(|v| v as f32).collect::<Vec<f32>>(), shape, device)?)
}

impl Batch {
    pub fn new(windows: &[&Window], config: &TrainConfig, with_env: bool, device: &Device) -> Result<Self> {
        let b = windows.len();
        let t = windows.first().map(|w| w.inputs.frames).ok_or_else(|| PipelineError::Data("empty batch".into()))?;
        if windows.iter().any(|w| w.inputs.frames != t) {
            return Err(PipelineError::Data("windows of different length in one batch".into()));
        }
        let cat = |f: &dyn Fn(&Window) -> &[f64]| windows.iter().flat_map(|w| f(w).to_vec()).collect::<Vec<f64>>();
        let x = stack(cat(&|w| &w.inputs.obs), &[b, t, OBS_DIM], device)?;
        let x_hm = stack(cat(&|w| &w.inputs.history), &[b, t, POSE_DIM], device)?;
        let x_new = stack(cat(&|w| &w.inputs.ext), &[b, t, OBS_DIM + 4], device)?;
        let head = stack(cat(&|w| &w.inputs.head), &[b, t, 3], device)?;
        let with_targets = windows.iter().all(|w| w.targets.is_some());
        let (theta_gt, positions_gt, contacts) = if with_targets {
            let tg = |f: &dyn Fn(&crate::windows::WindowTargets) -> &[f64]| {
                windows.iter().flat_map(|w| f(w.targets.as_ref().unwrap()).to_vec()).collect::<Vec<f64>>()
            };
            (
                Some(stack(tg(&|g| &g.pose), &[b, t, POSE_DIM], device)?),
                Some(stack(tg(&|g| &g.positions), &[b, t, NUM_JOINTS, 3], device)?),
                Some(stack(tg(&|g| &g.contacts), &[b, t, NUM_JOINTS], device)?),
            )
        } else {
            (None, None, None)
        };
        let (env, salience) = if with_env {
            let n = config.variant.n_points;
            if windows.iter().any(|w| w.inputs.env.len() != n) {
                return Err(PipelineError::Data(format!("environment crops must hold {n} points")));
            }
            let pts: Vec<f32> = windows.iter().flat_map(|w| w.inputs.env.iter().flatten().copied()).collect();
            let sal: Vec<f32> = windows.iter().flat_map(|w| w.inputs.salience.iter().flatten().copied()).collect();
            let hierarchies = match config.model.stage2.encoder {
                EnvEncoderKind::Hierarchical => windows.iter().map(|w| build_hierarchy(&w.inputs.env, &config.model.stage2.hierarchy)).collect(),
                EnvEncoderKind::Flat => vec![],
            };
            (
                Some(EnvBatch {
                    points: Tensor::from_vec(pts, (b, n, 3), device)?,
                    hierarchies,
                }),
                Some(Tensor::from_vec(sal, (b, n, 4), device)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            x,
            x_hm,
            x_new,
            head,
            env,
            salience,
            theta_gt,
            positions_gt,
            contacts,
            crops: windows.iter().map(|w| w.inputs.collision.clone()).collect(),
            z_ground: windows.iter().map(|w| w.inputs.z_ground).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.z_ground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_ground.is_empty()
    }
}

pub struct Estimator {
    pub config: TrainConfig,
    pub tree: KinematicTree,
    pub tree_tensors: TreeTensors,
    pub map: VarMap,
    pub stage1: Stage1,
    pub stage2: Option<Stage2>,
    pub device: Device,
}

impl Estimator {
    /// Freshly initialized Stage I, seeded from the configuration.
    pub fn new(config: &TrainConfig, tree: &KinematicTree) -> Result<Self> {
        let device = Device::Cpu;
        let map = VarMap::new();
        let vb = VarBuilder::from_varmap(&map, DTYPE, &device);
        let stage1 = Stage1::new(config.model.stage1.clone(), vb.pp(STAGE1_PREFIX))?;
        reinitialize(&map, &[STAGE1_PREFIX], config.seed ^ 0x7331)?;
        Ok(Self {
            config: config.clone(),
            tree: tree.clone(),
            tree_tensors: TreeTensors::new(tree, DTYPE, &device)?,
            map,
            stage1,
            stage2: None,
            device,
        })
    }

    /// Adds a freshly initialized Stage II.
    pub fn add_stage2(&mut self) -> Result<()> {
        if self.stage2.is_some() {
            return Ok(());
        }
        let vb = VarBuilder::from_varmap(&self.map, DTYPE, &self.device);
        self.stage2 = Some(Stage2::new(self.config.stage2_config(), vb.pp(STAGE2_PREFIX))?);
        reinitialize(&self.map, &[STAGE2_PREFIX], self.config.seed ^ 0x7332)?;
        Ok(())
    }

    pub fn stage1_vars(&self, include_uncertainty: bool) -> Vec<(String, candle_core::Var)> {
        let head = format!("{STAGE1_PREFIX}.{UNCERTAINTY_HEAD}");
        named_vars(&self.map, &[STAGE1_PREFIX])
            .into_iter()
            .filter(|(n, _)| include_uncertainty || !n.starts_with(&head))
            .collect()
    }

    pub fn stage2_vars(&self) -> Vec<(String, candle_core::Var)> {
        named_vars(&self.map, &[STAGE2_PREFIX])
    }

    pub fn switches(&self) -> Stage2Switches {
        Stage2Switches {
            env_semantic: self.config.variant.env_semantic,
            contact_head: self.config.variant.contact_head,
        }
    }

    /// Whether batches need environment crops.
    pub fn needs_env(&self) -> bool {
        self.stage2.is_some()
    }

    pub fn run_stage1(&self, batch: &Batch) -> Result<Stage1Output> {
        Ok(self.stage1.forward(&batch.x, &batch.x_hm)?)
    }

    pub fn run_stage2(&self, batch: &Batch, theta_sample: &Tensor) -> Result<Stage2Output> {
        let stage2 = self.stage2.as_ref().ok_or_else(|| PipelineError::Config("no stage 2 in this model".into()))?;
        let env = batch.env.as_ref().ok_or_else(|| PipelineError::Data("batch has no environment crops".into()))?;
        let sal = batch.salience.as_ref().expect("salience comes with the crops");
        Ok(stage2.forward(theta_sample, &batch.head, &batch.x_new, env, sal, self.switches())?)
    }

    /// Joint positions with the head joint on the observed head.
    pub fn positions(&self, pose: &Tensor, head: &Tensor) -> Result<Tensor> {
        Ok(anchored_positions(pose, HEAD, head, &self.tree_tensors)?)
    }

    pub fn checkpoint(&self, optimizer: Option<&Adam>) -> Result<Checkpoint> {
        let records = |vars: Vec<(String, Tensor)>| -> Result<Vec<TensorRecord>> {
            let mut out: Vec<TensorRecord> = vars
                .into_iter()
                .map(|(name, t)| {
                    Ok(TensorRecord {
                        shape: t.dims().to_vec(),
                        data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                        name,
                    })
                })
                .collect::<Result<_>>()?;
            out.sort_by(|a, b| a.name.cmp(&b.name));
            Ok(out)
        };
        let params = records(named_vars(&self.map, &[]).into_iter().map(|(n, v)| (n, v.as_tensor().clone())).collect())?;
        let (step, state) = optimizer.map(|o| o.state()).unwrap_or((0, vec![]));
        Ok(Checkpoint {
            stage: if self.stage2.is_some() { 2 } else { 1 },
            config: self.config.clone(),
            skeleton_toml: self.tree.to_toml(),
            params,
            optimizer_step: step,
            optimizer: records(state)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tree = KinematicTree::from_toml(&ckpt.skeleton_toml).map_err(|e| PipelineError::Data(e.to_string()))?;
        let mut est = Self::new(&ckpt.config, &tree)?;
        if ckpt.stage == 2 {
            est.add_stage2()?;
        }
        est.load_params(&ckpt.params, None)?;
        Ok(est)
    }

    /// Copies parameters by name. With `prefix`, only names under it are
    /// loaded and every such variable must be present.
    pub fn load_params(&self, params: &[TensorRecord], prefix: Option<&str>) -> Result<()> {
        let vars = named_vars(&self.map, &prefix.map(|p| vec![p]).unwrap_or_default());
        for (name, var) in &vars {
            let rec = params
                .iter()
                .find(|r| &r.name == name)
                .ok_or_else(|| PipelineError::Data(format!("checkpoint lacks parameter {name}")))?;
            if rec.shape != var.as_tensor().dims() {
                return Err(PipelineError::Data(format!("parameter {name}: shape {:?} vs {:?}", rec.shape, var.as_tensor().dims())));
            }
            var.set(&Tensor::from_vec(rec.data.clone(), rec.shape.as_slice(), &self.device)?)?;
        }
        if prefix.is_none() && vars.len() != params.len() {
            return Err(PipelineError::Data(format!("checkpoint has {} parameters, model {}", params.len(), vars.len())));
        }
        Ok(())
    }
}

/// Restores Adam moments saved by [`Estimator::checkpoint`].
pub fn restore_optimizer(opt: &mut Adam, ckpt: &Checkpoint, device: &Device) -> Result<()> {
    let state: Vec<(String, Tensor)> = ckpt
        .optimizer
        .iter()
        .map(|r| Ok((r.name.clone(), Tensor::from_vec(r.data.clone(), r.shape.as_slice(), device)?)))
        .collect::<Result<_>>()?;
    opt.load_state(ckpt.optimizer_step, &state)?;
    Ok(())
}
