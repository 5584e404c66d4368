//! Evaluation over a split: pose metrics, penetration into scene props and,
//! for two-stage models, the mean per-term loss on teacher-forced windows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scenepose_core::metrics::{MetricsAccumulator, MetricsReport};
use scenepose_core::skeleton::{body_capsules, JointPositions, KinematicTree};
use scenepose_core::synthdata::{penetration_depth, ScenePrimitive};
use scenepose_model::objectives::LossReport;

use crate::error::{PipelineError, Result};
use crate::estimator::Estimator;
use crate::infer::{infer, EpsilonMode, Prediction};
use crate::train::{mean_loss_report, window_pool};
use crate::windows::Sequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub mpjpe_mm: f64,
    pub penetration_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    /// Mean over frames of the deepest intrusion into non-floor props, mm.
    pub penetration_mm: f64,
    pub losses: Option<LossReport>,
    pub sequences: Vec<SequenceResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Metrics as `key = value` lines followed by penetration and losses.
    pub fn to_text(&self) -> String {
        let mut s = self.metrics.to_key_value();
        s.push_str(&format!("penetration_mm = {}\n", self.penetration_mm));
        if let Some(l) = &self.losses {
            for (k, v) in l.entries() {
                s.push_str(&format!("loss.{k} = {v}\n"));
            }
        }
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(PipelineError::io(&json))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_text()).map_err(PipelineError::io(&txt))
    }
}

/// Mean per-frame penetration depth in metres.
pub fn mean_penetration(positions: &JointPositions, primitives: &[ScenePrimitive], tree: &KinematicTree) -> f64 {
    let frames = positions.n_frames();
    if frames == 0 {
        return 0.0;
    }
    let total: f64 = (0..frames)
        .map(|t| penetration_depth(&body_capsules(positions.frame(t), tree, tree.bone_radii()), primitives, false))
        .sum();
    total / frames as f64
}

/// Scores given predictions against the ground truth of `sequences`.
pub fn evaluate_predictions(sequences: &[Sequence], predictions: &[(Vec<f64>, JointPositions)], tree: &KinematicTree) -> Result<EvalReport> {
    if sequences.len() != predictions.len() {
        return Err(PipelineError::Data(format!("{} sequences but {} predictions", sequences.len(), predictions.len())));
    }
    let mut acc = MetricsAccumulator::new();
    let mut per = Vec::with_capacity(sequences.len());
    let mut pen_sum = 0.0;
    let mut frames = 0usize;
    for (seq, (pose, positions)) in sequences.iter().zip(predictions) {
        acc.add_sequence(pose, &seq.pose, positions, &seq.positions, seq.stream.fps)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", seq.stream.name)))?;
        let mut one = MetricsAccumulator::new();
        one.add_sequence(pose, &seq.pose, positions, &seq.positions, seq.stream.fps)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", seq.stream.name)))?;
        let pen = mean_penetration(positions, &seq.primitives, tree);
        pen_sum += pen * positions.n_frames() as f64;
        frames += positions.n_frames();
        per.push(SequenceResult {
            name: seq.stream.name.clone(),
            mpjpe_mm: one.report().mpjpe_mm,
            penetration_mm: pen * 1000.0,
        });
    }
    Ok(EvalReport {
        metrics: acc.report(),
        penetration_mm: if frames == 0 { 0.0 } else { 1000.0 * pen_sum / frames as f64 },
        losses: None,
        sequences: per,
    })
}

/// Runs inference on every sequence and scores it.
pub fn predict_all(est: &Estimator, sequences: &[Sequence], mode: EpsilonMode) -> Result<Vec<Prediction>> {
    sequences
        .iter()
        .enumerate()
        .map(|(i, seq)| infer(est, &seq.stream, mode, i))
        .collect()
}

/// Full evaluation with `ε = 0`. `with_losses` adds the teacher-forced loss
/// report for two-stage models.
pub fn evaluate(est: &Estimator, sequences: &[Sequence], with_losses: bool) -> Result<EvalReport> {
    let preds = predict_all(est, sequences, EpsilonMode::Zero)?;
    let pairs: Vec<(Vec<f64>, JointPositions)> = preds.into_iter().map(|p| (p.pose, p.positions)).collect();
    let mut report = evaluate_predictions(sequences, &pairs, &est.tree)?;
    if with_losses && est.stage2.is_some() {
        let pool = window_pool(&est.config, sequences, true)?;
        report.losses = Some(mean_loss_report(est, &pool)?);
    }
    Ok(report)
}
