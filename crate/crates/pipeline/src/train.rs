//! Two-stage training: Stage I in a motion-only phase followed by an
//! uncertainty phase, then Stage II with Stage I frozen and optionally a
//! joint phase.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scenepose_core::skeleton::KinematicTree;
use scenepose_core::synthdata::{Dataset, Split};
use scenepose_core::POSE_DIM;
use scenepose_model::nn::{Adam, AdamConfig};
use scenepose_model::objectives::{
    collision_loss, contact_loss_logits, final_motion_loss, foot_losses, position_losses, total_stage2, LossReport,
    Stage2Terms,
};
use scenepose_model::stage1::{loss_stage1, sample_pose};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{NanDump, PipelineError, Result};
use crate::estimator::{Batch, Estimator};
use crate::windows::{crop_seed, training_starts, Sequence, Window, WindowBuilder};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: u8,
    pub phase: &'static str,
    pub step: usize,
    pub lr: f64,
    pub losses: Vec<(String, f64)>,
}

impl StepRecord {
    pub fn loss(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub struct Trained {
    pub estimator: Estimator,
    pub optimizer: Adam,
    pub log: Vec<StepRecord>,
}

impl Trained {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.estimator.checkpoint(Some(&self.optimizer))
    }
}

/// Loads one split of a dataset as sequences ready for windowing.
pub fn load_sequences(config: &TrainConfig, split: Split) -> Result<(KinematicTree, Vec<Sequence>)> {
    let dataset = Dataset::open(&config.dataset)?;
    let episodes = dataset.load_split(split)?;
    if episodes.is_empty() {
        return Err(PipelineError::Data(format!("{}: split {} is empty", config.dataset.display(), split.as_str())));
    }
    let seqs = episodes
        .iter()
        .map(|ep| Sequence::from_episode(ep, &dataset.tree, &config.data))
        .collect::<Result<Vec<_>>>()?;
    Ok((dataset.tree, seqs))
}

/// Every training window of every sequence, teacher forced.
pub fn window_pool(config: &TrainConfig, sequences: &[Sequence], with_env: bool) -> Result<Vec<Window>> {
    let builder = WindowBuilder {
        data: &config.data,
        variant: &config.variant,
        with_env,
    };
    let mut pool = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        for start in training_starts(seq.n_frames(), config.data.window, config.data.train_stride) {
            pool.push(builder.training_window(seq, start, crop_seed(config.seed, i, start))?);
        }
    }
    if pool.is_empty() {
        return Err(PipelineError::Data(format!("no sequence holds a full {}-frame window", config.data.window)));
    }
    Ok(pool)
}

fn adam(config: &TrainConfig, vars: Vec<(String, candle_core::Var)>) -> Result<Adam> {
    Ok(Adam::new(
        vars,
        AdamConfig {
            lr: config.optim.lr,
            max_grad_norm: config.optim.max_grad_norm,
            ..Default::default()
        },
    )?)
}

/// Learning rate at `step` of `total`, with optional cosine decay.
pub fn learning_rate(config: &TrainConfig, step: usize, total: usize) -> f64 {
    if !config.optim.cosine_decay || total == 0 {
        return config.optim.lr;
    }
    0.5 * config.optim.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(seed: u64, tag: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        }
    }

    fn batch<'a>(&mut self, pool: &'a [Window], size: usize) -> Vec<&'a Window> {
        (0..size).map(|_| &pool[self.rng.gen_range(0..pool.len())]).collect()
    }

    fn normal(&mut self, shape: &[usize], device: &candle_core::Device) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| self.rng.sample::<f32, _>(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, shape, device)?)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn non_finite(stage: u8, phase: &str, step: usize, batch: &[&Window], losses: Vec<(String, f64)>) -> PipelineError {
    PipelineError::NonFinite(Box::new(NanDump {
        stage,
        phase: phase.to_string(),
        step,
        windows: batch.iter().map(|w| (w.sequence.clone(), w.inputs.start)).collect(),
        losses,
    }))
}

fn record(log: &mut Vec<StepRecord>, config: &TrainConfig, rec: StepRecord) {
    let every = config.optim.log_every.max(1);
    if rec.step % every == 0 {
        let parts: Vec<String> = rec.losses.iter().map(|(n, v)| format!("{n}={v:.5}")).collect();
        log::info!("stage {} {} step {} lr {:.2e} {}", rec.stage, rec.phase, rec.step, rec.lr, parts.join(" "));
    }
    log.push(rec);
}

pub const PHASE_MOTION: &str = "motion";
pub const PHASE_UNCERTAINTY: &str = "uncertainty";
pub const PHASE_FROZEN: &str = "frozen";
pub const PHASE_JOINT: &str = "joint";

/// Stage I motion-only phase: `λ_M·L_M` on everything but the uncertainty head.
pub fn stage1_motion_phase(est: &Estimator, pool: &[Window], log: &mut Vec<StepRecord>) -> Result<Adam> {
    let config = &est.config;
    let mut opt = adam(config, est.stage1_vars(false))?;
    stage1_loop(est, pool, &mut opt, PHASE_MOTION, config.optim.stage1_motion_steps, false, 0, log)?;
    Ok(opt)
}

/// Stage I uncertainty phase: adds `λ_δ·L_δ` and trains every Stage I
/// parameter. With uncertainty disabled it keeps training `L_M` alone.
pub fn stage1_uncertainty_phase(est: &Estimator, pool: &[Window], previous: &Adam, log: &mut Vec<StepRecord>) -> Result<Adam> {
    let config = &est.config;
    let with_unc = config.variant.uncertainty;
    let mut opt = adam(config, est.stage1_vars(with_unc))?;
    let (step, state) = previous.state();
    opt.load_state(step, &state)?;
    let offset = config.optim.stage1_motion_steps;
    stage1_loop(est, pool, &mut opt, PHASE_UNCERTAINTY, config.optim.stage1_uncertainty_steps, with_unc, offset, log)?;
    Ok(opt)
}

#[allow(clippy::too_many_arguments)]
fn stage1_loop(
    est: &Estimator,
    pool: &[Window],
    opt: &mut Adam,
    phase: &'static str,
    steps: usize,
    with_delta: bool,
    offset: usize,
    log: &mut Vec<StepRecord>,
) -> Result<()> {
    let config = &est.config;
    let w = config.effective_weights();
    let total_steps = config.optim.stage1_motion_steps + config.optim.stage1_uncertainty_steps;
    let mut sampler = Sampler::new(config.seed, 0x5131 + offset as u64);
    for step in 0..steps {
        let lr = learning_rate(config, offset + step, total_steps);
        opt.set_lr(lr);
        let windows = sampler.batch(pool, config.optim.batch_size);
        let batch = Batch::new(&windows, config, false, &est.device)?;
        let out = est.run_stage1(&batch)?;
        let gt = batch.theta_gt.as_ref().expect("training windows carry targets");
        let lambda_delta = if with_delta { w.lambda_delta } else { 0.0 };
        let losses = loss_stage1(&out.theta_mean, &out.delta, gt, w.lambda_m, lambda_delta, config.model.stage1.uncertainty_loss)?;
        let values = vec![
            ("l_m".to_string(), scalar(&losses.l_m)?),
            ("l_delta".to_string(), scalar(&losses.l_delta)?),
            ("total".to_string(), scalar(&losses.total)?),
        ];
        if values.iter().any(|(_, v)| !v.is_finite()) {
            return Err(non_finite(1, phase, offset + step, &windows, values));
        }
        opt.step(&losses.total.backward()?)?;
        record(
            log,
            config,
            StepRecord {
                stage: 1,
                phase,
                step: offset + step,
                lr,
                losses: values,
            },
        );
    }
    Ok(())
}

/// Runs both Stage I phases from a fresh seeded initialization.
pub fn train_stage1(config: &TrainConfig, tree: &KinematicTree, sequences: &[Sequence]) -> Result<Trained> {
    config.validate()?;
    let est = Estimator::new(config, tree)?;
    let pool = window_pool(config, sequences, false)?;
    let mut log = Vec::new();
    let opt_a = stage1_motion_phase(&est, &pool, &mut log)?;
    let optimizer = stage1_uncertainty_phase(&est, &pool, &opt_a, &mut log)?;
    Ok(Trained {
        estimator: est,
        optimizer,
        log,
    })
}

/// Stage II terms for one batch. `detach_stage1` cuts gradients into Stage I.
pub fn stage2_terms(est: &Estimator, batch: &Batch, epsilon: &Tensor, detach_stage1: bool) -> Result<Stage2Terms> {
    let config = &est.config;
    let w = config.effective_weights();
    let gt = batch.theta_gt.as_ref().ok_or_else(|| PipelineError::Data("batch has no targets".into()))?;
    let pos_gt = batch.positions_gt.as_ref().expect("targets come together");
    let contacts = batch.contacts.as_ref().expect("targets come together");

    let s1 = est.run_stage1(batch)?;
    let (mean, delta) = if detach_stage1 {
        (s1.theta_mean.detach(), s1.delta.detach())
    } else {
        (s1.theta_mean, s1.delta)
    };
    let l_si = loss_stage1(&mean, &delta, gt, w.lambda_m, w.lambda_delta, config.model.stage1.uncertainty_loss)?.total;
    let theta_sample = sample_pose(&mean, &delta, epsilon)?;
    let out = est.run_stage2(batch, &theta_sample)?;
    let positions = est.positions(&out.theta_final, &batch.head)?;
    let (posi, hal) = position_losses(&positions, pos_gt)?;
    let (fc, gfh, gp) = foot_losses(&positions, pos_gt, contacts, &batch.z_ground, config.ground_height)?;
    let coap = if w.coap > 0.0 {
        collision_loss(&positions, &batch.crops, &est.tree)?
    } else {
        positions.zeros_like()?.sum_all()?
    };
    Ok(Stage2Terms {
        l_si,
        l_m_final: final_motion_loss(&out.theta_final, gt)?,
        posi,
        hal,
        fc,
        contact: contact_loss_logits(&out.contact_logits, contacts)?,
        gfh,
        gp,
        coap,
    })
}

fn terms_values(terms: &Stage2Terms) -> Result<Vec<(String, f64)>> {
    let list = [
        ("l_si", &terms.l_si),
        ("l_m_final", &terms.l_m_final),
        ("posi", &terms.posi),
        ("hal", &terms.hal),
        ("fc", &terms.fc),
        ("contact", &terms.contact),
        ("gfh", &terms.gfh),
        ("gp", &terms.gp),
        ("coap", &terms.coap),
    ];
    list.iter().map(|(n, t)| Ok((n.to_string(), scalar(t)?))).collect()
}

/// Standard-normal noise when uncertainty is on, zeros otherwise.
fn epsilon(est: &Estimator, sampler: &mut Sampler, batch: &Batch) -> Result<Tensor> {
    let (b, t, _) = batch.x.dims3()?;
    if est.config.variant.uncertainty {
        sampler.normal(&[b, t, POSE_DIM], &est.device)
    } else {
        Ok(Tensor::zeros((b, t, POSE_DIM), DType::F32, &est.device)?)
    }
}

/// Stage II training from a Stage I checkpoint.
pub fn train_stage2(config: &TrainConfig, tree: &KinematicTree, sequences: &[Sequence], stage1: &Checkpoint) -> Result<Trained> {
    config.validate()?;
    let mut est = Estimator::new(config, tree)?;
    est.load_params(&stage1.params, Some(crate::estimator::STAGE1_PREFIX))?;
    est.add_stage2()?;
    let pool = window_pool(config, sequences, true)?;
    let mut log = Vec::new();
    let frozen = config.optim.stage2_frozen_steps;
    let joint = config.optim.stage2_joint_steps;
    let mut opt = adam(config, est.stage2_vars())?;
    stage2_loop(&est, &pool, &mut opt, PHASE_FROZEN, 0, frozen, &mut log)?;
    if joint > 0 {
        let mut vars = est.stage1_vars(config.variant.uncertainty);
        vars.extend(est.stage2_vars());
        let mut joint_opt = adam(config, vars)?;
        let (step, state) = opt.state();
        joint_opt.load_state(step, &state)?;
        opt = joint_opt;
        stage2_loop(&est, &pool, &mut opt, PHASE_JOINT, frozen, joint, &mut log)?;
    }
    Ok(Trained {
        estimator: est,
        optimizer: opt,
        log,
    })
}

fn stage2_loop(
    est: &Estimator,
    pool: &[Window],
    opt: &mut Adam,
    phase: &'static str,
    offset: usize,
    steps: usize,
    log: &mut Vec<StepRecord>,
) -> Result<()> {
    let config = &est.config;
    let w = config.effective_weights();
    let total_steps = config.optim.stage2_frozen_steps + config.optim.stage2_joint_steps;
    let mut sampler = Sampler::new(config.seed, 0x5232 + offset as u64);
    for step in 0..steps {
        let lr = learning_rate(config, offset + step, total_steps);
        opt.set_lr(lr);
        let windows = sampler.batch(pool, config.optim.batch_size);
        let batch = Batch::new(&windows, config, true, &est.device)?;
        let eps = epsilon(est, &mut sampler, &batch)?;
        let terms = stage2_terms(est, &batch, &eps, phase == PHASE_FROZEN)?;
        let values = terms_values(&terms)?;
        if values.iter().any(|(_, v)| !v.is_finite()) {
            return Err(non_finite(2, phase, offset + step, &windows, values));
        }
        let (total, report) = total_stage2(&terms, &w)?;
        opt.step(&total.backward()?)?;
        record(
            log,
            config,
            StepRecord {
                stage: 2,
                phase,
                step: offset + step,
                lr,
                losses: report.entries().iter().map(|(n, v)| (n.to_string(), *v)).collect(),
            },
        );
    }
    Ok(())
}

/// Loss report averaged over `pool` in batches, with `ε = 0`.
pub fn mean_loss_report(est: &Estimator, pool: &[Window]) -> Result<LossReport> {
    let w = est.config.effective_weights();
    let mut sums = [0.0f64; 10];
    let mut count = 0usize;
    for chunk in pool.chunks(est.config.optim.batch_size.max(1)) {
        let windows: Vec<&Window> = chunk.iter().collect();
        let batch = Batch::new(&windows, &est.config, true, &est.device)?;
        let (b, t, _) = batch.x.dims3()?;
        let eps = Tensor::zeros((b, t, POSE_DIM), DType::F32, &est.device)?;
        let terms = stage2_terms(est, &batch, &eps, true)?;
        let (_, report) = total_stage2(&terms, &w)?;
        for (s, (_, v)) in sums.iter_mut().zip(report.entries()) {
            *s += v * b as f64;
        }
        count += b;
    }
    let n = count.max(1) as f64;
    let m = sums.map(|s| s / n);
    Ok(LossReport {
        l_si: m[0],
        l_m_final: m[1],
        posi: m[2],
        hal: m[3],
        fc: m[4],
        contact: m[5],
        gfh: m[6],
        gp: m[7],
        coap: m[8],
        total: m[9],
    })
}
