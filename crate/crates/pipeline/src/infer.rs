//! Autoregressive inference over non-overlapping windows. Each window reads
//! its history from the poses already predicted, and outputs are mapped back
//! to world coordinates.

use candle_core::{DType, Tensor};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use scenepose_core::environment::EnvironmentCloud;
use scenepose_core::skeleton::JointPositions;
use scenepose_core::{NUM_JOINTS, OBS_DIM, POSE_DIM};
use scenepose_model::stage1::sample_pose;

use crate::error::{PipelineError, Result};
use crate::estimator::{Batch, Estimator};
use crate::windows::{crop_seed, inference_starts, Stream, Window, WindowBuilder, WindowInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonMode {
    /// Mean hypothesis.
    Zero,
    /// One seeded draw per window.
    Sample,
}

impl std::str::FromStr for EpsilonMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "sample" => Ok(Self::Sample),
            other => Err(PipelineError::Config(format!("epsilon mode must be zero or sample, got {other}"))),
        }
    }
}

/// Per-frame outputs in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `frames × 132`.
    pub pose: Vec<f64>,
    pub positions: JointPositions,
    /// Contact probabilities, `frames × 22`; zeros without Stage II.
    pub contacts: Vec<f64>,
    /// Stage I standard deviations, `frames × 132`.
    pub delta: Vec<f64>,
}

impl Prediction {
    pub fn n_frames(&self) -> usize {
        self.pose.len() / POSE_DIM
    }

    fn empty() -> Self {
        Self {
            pose: vec![],
            positions: JointPositions::new(NUM_JOINTS, vec![]),
            contacts: vec![],
            delta: vec![],
        }
    }

    fn append(&mut self, other: &Prediction, skip: usize) {
        self.pose.extend_from_slice(&other.pose[skip * POSE_DIM..]);
        self.contacts.extend_from_slice(&other.contacts[skip * NUM_JOINTS..]);
        self.delta.extend_from_slice(&other.delta[skip * POSE_DIM..]);
        let mut pts = self.positions.as_slice().to_vec();
        pts.extend_from_slice(&other.positions.as_slice()[skip * NUM_JOINTS..]);
        self.positions = JointPositions::new(NUM_JOINTS, pts);
    }
}

fn epsilon_for(mode: EpsilonMode, seed: u64, start: usize, frames: usize) -> Vec<f32> {
    match mode {
        EpsilonMode::Zero => vec![0.0; frames * POSE_DIM],
        EpsilonMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (start as u64).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x6570_73);
            (0..frames * POSE_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    }
}

fn tensor_rows(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Runs one window and returns its frames in world coordinates.
fn run_window(est: &Estimator, inputs: WindowInputs, mode: EpsilonMode) -> Result<Prediction> {
    let frames = inputs.frames;
    let canon = inputs.canon;
    let start = inputs.start;
    let with_env = est.stage2.is_some();
    let window = Window {
        sequence: String::new(),
        inputs,
        targets: None,
    };
    let batch = Batch::new(&[&window], &est.config, with_env, &est.device)?;
    let s1 = est.run_stage1(&batch)?;
    let eps_mode = if est.config.variant.uncertainty { mode } else { EpsilonMode::Zero };
    let eps = Tensor::from_vec(epsilon_for(eps_mode, est.config.seed, start, frames), (1, frames, POSE_DIM), &est.device)?;
    let sample = sample_pose(&s1.theta_mean, &s1.delta, &eps)?;
    let (pose_t, contacts) = if with_env {
        let out = est.run_stage2(&batch, &sample)?;
        (out.theta_final, tensor_rows(&out.contact_probs)?)
    } else {
        (sample, vec![0.0; frames * NUM_JOINTS])
    };
    let positions = tensor_rows(&est.positions(&pose_t, &batch.head)?)?;
    let mut pose = tensor_rows(&pose_t)?;
    for k in 0..frames {
        canon.inverse_rot6d(&mut pose[k * POSE_DIM..k * POSE_DIM + 6]);
    }
    let world: Vec<Vector3<f64>> = positions
        .chunks_exact(3)
        .map(|p| canon.inverse_point(&Vector3::new(p[0], p[1], p[2])))
        .collect();
    Ok(Prediction {
        pose,
        positions: JointPositions::new(NUM_JOINTS, world),
        contacts,
        delta: tensor_rows(&s1.delta)?,
    })
}

fn builder(est: &Estimator) -> WindowBuilder<'_> {
    WindowBuilder {
        data: &est.config.data,
        variant: &est.config.variant,
        with_env: est.stage2.is_some(),
    }
}

/// Whole-stream inference. `sequence_index` only feeds the crop seeds.
pub fn infer(est: &Estimator, stream: &Stream, mode: EpsilonMode, sequence_index: usize) -> Result<Prediction> {
    let window = est.config.data.window;
    let frames = stream.n_frames();
    if frames < window {
        return Err(PipelineError::Data(format!("{}: {frames} frames, need at least {window}", stream.name)));
    }
    let b = builder(est);
    let mut history = vec![0.0; frames * POSE_DIM];
    let mut out = Prediction::empty();
    for start in inference_starts(frames, window) {
        let inputs = b.inputs(stream, start, &history[..start * POSE_DIM], crop_seed(est.config.seed, sequence_index, start))?;
        let pred = run_window(est, inputs, mode)?;
        let done = out.n_frames();
        let skip = done - start;
        history[done * POSE_DIM..(start + window) * POSE_DIM].copy_from_slice(&pred.pose[skip * POSE_DIM..]);
        out.append(&pred, skip);
    }
    Ok(out)
}

/// Incremental inference: frames are pushed as they arrive and a window is
/// emitted as soon as it is complete.
pub struct Session<'a> {
    est: &'a Estimator,
    stream: Stream,
    mode: EpsilonMode,
    sequence_index: usize,
    output: Prediction,
}

impl<'a> Session<'a> {
    pub fn new(est: &'a Estimator, name: &str, fps: f64, cloud: EnvironmentCloud, mode: EpsilonMode, sequence_index: usize) -> Self {
        Self {
            est,
            stream: Stream::empty(name.to_string(), fps, cloud),
            mode,
            sequence_index,
            output: Prediction::empty(),
        }
    }

    /// Appends `frames × 36` observations and returns the newly finished frames.
    pub fn push(&mut self, obs: &[f64]) -> Result<Option<Prediction>> {
        self.stream.push_frames(obs)?;
        let window = self.est.config.data.window;
        let mut emitted: Option<Prediction> = None;
        while self.stream.n_frames() >= self.output.n_frames() + window {
            let start = self.output.n_frames();
            let pred = self.window_at(start)?;
            emitted.get_or_insert_with(Prediction::empty).append(&pred, 0);
            self.output.append(&pred, 0);
        }
        Ok(emitted)
    }

    /// Flushes a trailing partial window, aligned to the end of the stream.
    pub fn finish(mut self) -> Result<Prediction> {
        let window = self.est.config.data.window;
        let frames = self.stream.n_frames();
        if frames < window {
            return Err(PipelineError::Data(format!("{}: {frames} frames, need at least {window}", self.stream.name)));
        }
        let done = self.output.n_frames();
        if done < frames {
            let start = frames - window;
            let pred = self.window_at(start)?;
            self.output.append(&pred, done - start);
        }
        Ok(self.output)
    }

    fn window_at(&self, start: usize) -> Result<Prediction> {
        let b = builder(self.est);
        let seed = crop_seed(self.est.config.seed, self.sequence_index, start);
        let inputs = b.inputs(&self.stream, start, &self.output.pose[..start * POSE_DIM], seed)?;
        run_window(self.est, inputs, self.mode)
    }
}

/// Reads a `frames × 36` observation stream: whitespace-separated text for
/// `.txt` and `.csv` files (commas allowed), little-endian `f64` otherwise.
pub fn read_stream(path: &std::path::Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(PipelineError::io(path))?;
    let text_ext = matches!(path.extension().and_then(|e| e.to_str()), Some("txt") | Some("csv"));
    let values: Vec<f64> = if text_ext {
        let text = String::from_utf8(bytes).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        text.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| PipelineError::Data(format!("{}: {e}", path.display()))))
            .collect::<Result<_>>()?
    } else {
        if bytes.len() % 8 != 0 {
            return Err(PipelineError::Data(format!("{}: not a f64 array", path.display())));
        }
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    if values.is_empty() || values.len() % OBS_DIM != 0 {
        return Err(PipelineError::Data(format!("{}: {} values is not a multiple of {OBS_DIM}", path.display(), values.len())));
    }
    Ok(values)
}

/// Writes values as little-endian `f64`.
pub fn write_f64s(path: &std::path::Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(PipelineError::io(path))
}
