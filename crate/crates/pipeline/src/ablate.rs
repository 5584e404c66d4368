//! Trains and evaluates named variants under identical seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use scenepose_core::environment::CropShape;
use scenepose_core::metrics::MetricsReport;
use scenepose_core::skeleton::KinematicTree;

use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, Variant};
use crate::error::{PipelineError, Result};
use crate::evaluate::{evaluate, SequenceResult};
use crate::train::{train_stage1, train_stage2};
use crate::windows::Sequence;

pub const PRESETS: [&str; 10] = [
    "stage1_only",
    "geometry_only",
    "full",
    "no_uncertainty",
    "no_contact",
    "no_env_semantic",
    "no_env_geometry",
    "square_crop",
    "points_500",
    "points_2000",
];

/// Applies a named preset to `base`.
pub fn preset(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.stage = 2;
    cfg.variant = Variant {
        n_points: base.variant.n_points,
        ..Variant::default()
    };
    let v = &mut cfg.variant;
    match name {
        "full" => {}
        "stage1_only" => cfg.stage = 1,
        "geometry_only" | "no_env_semantic" => v.env_semantic = false,
        "no_uncertainty" => v.uncertainty = false,
        "no_contact" => v.contact_head = false,
        "no_env_geometry" => v.env_geometry = false,
        "square_crop" => v.crop = CropShape::Square,
        "points_500" => v.n_points = 500,
        "points_2000" => v.n_points = 2000,
        other => {
            return Err(PipelineError::Config(format!("unknown variant {other}; expected one of {}", PRESETS.join(", "))));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Identity of the Stage I model a configuration trains: everything Stage I
/// reads, with Stage II settings reset.
pub fn stage1_key(cfg: &TrainConfig) -> String {
    let mut k = cfg.clone();
    k.stage = 1;
    k.output = Default::default();
    k.stage1_checkpoint = None;
    k.variant = Variant {
        uncertainty: cfg.variant.uncertainty,
        ..Variant::default()
    };
    k.model.stage2 = Default::default();
    k.optim.stage2_frozen_steps = 0;
    k.optim.stage2_joint_steps = 0;
    k.loss = scenepose_model::objectives::LossWeights {
        lambda_m: cfg.loss.lambda_m,
        lambda_delta: cfg.loss.lambda_delta,
        ..Default::default()
    };
    k.ground_height = scenepose_model::objectives::GroundHeightMode::ContactMasked;
    k.hash()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub penetration_mm: f64,
    pub sequences: Vec<SequenceResult>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantMean {
    pub mpjre_deg: f64,
    pub mpjpe_mm: f64,
    pub mpjve_mm_s: f64,
    pub jitter_e2_m_s3: f64,
    pub penetration_mm: f64,
    pub runs: usize,
}

impl AblationTable {
    /// Seed-averaged values of one variant.
    pub fn mean(&self, variant: &str) -> Option<VariantMean> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == variant).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let avg = |f: &dyn Fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(VariantMean {
            mpjre_deg: avg(&|r| r.metrics.mpjre_deg),
            mpjpe_mm: avg(&|r| r.metrics.mpjpe_mm),
            mpjve_mm_s: avg(&|r| r.metrics.mpjve_mm_s),
            jitter_e2_m_s3: avg(&|r| r.metrics.jitter_e2_m_s3),
            penetration_mm: avg(&|r| r.penetration_mm),
            runs: rows.len(),
        })
    }

    pub fn variants(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.variant) {
                seen.push(r.variant.clone());
            }
        }
        seen
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Fixed-width table: one line per run, then one mean line per variant.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<18} {:>6} {:>10} {:>10} {:>12} {:>10} {:>10}\n",
            "variant", "seed", "mpjre_deg", "mpjpe_mm", "mpjve_mm_s", "jitter", "pen_mm"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<18} {:>6} {:>10.3} {:>10.3} {:>12.3} {:>10.3} {:>10.3}\n",
                r.variant, r.seed, r.metrics.mpjre_deg, r.metrics.mpjpe_mm, r.metrics.mpjve_mm_s, r.metrics.jitter_e2_m_s3, r.penetration_mm
            ));
        }
        for v in self.variants() {
            let m = self.mean(&v).expect("variant has rows");
            s.push_str(&format!(
                "{:<18} {:>6} {:>10.3} {:>10.3} {:>12.3} {:>10.3} {:>10.3}\n",
                v, "mean", m.mpjre_deg, m.mpjpe_mm, m.mpjve_mm_s, m.jitter_e2_m_s3, m.penetration_mm
            ));
        }
        s
    }
}

/// Trains every variant for every seed on `train` and evaluates on `test`.
/// Stage I models shared between variants are trained once per seed.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[String],
    seeds: &[u64],
    tree: &KinematicTree,
    train: &[Sequence],
    test: &[Sequence],
) -> Result<AblationTable> {
    let configs: Vec<(String, TrainConfig)> = variants.iter().map(|v| Ok((v.clone(), preset(base, v)?))).collect::<Result<_>>()?;
    let mut stage1_cache: BTreeMap<String, Checkpoint> = BTreeMap::new();
    let mut table = AblationTable::default();
    for &seed in seeds {
        for (name, cfg) in &configs {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let key = stage1_key(&cfg);
            if !stage1_cache.contains_key(&key) {
                log::info!("ablation: stage 1 for seed {seed} (uncertainty {})", cfg.variant.uncertainty);
                let mut s1cfg = cfg.clone();
                s1cfg.stage = 1;
                let trained = train_stage1(&s1cfg, tree, train)?;
                stage1_cache.insert(key.clone(), trained.checkpoint()?);
            }
            let s1 = &stage1_cache[&key];
            let est = if cfg.stage == 1 {
                crate::estimator::Estimator::from_checkpoint(s1)?
            } else {
                log::info!("ablation: stage 2 for {name}, seed {seed}");
                train_stage2(&cfg, tree, train, s1)?.estimator
            };
            let report = evaluate(&est, test, false)?;
            log::info!("ablation: {name} seed {seed} mpjpe {:.3} mm", report.metrics.mpjpe_mm);
            table.rows.push(AblationRow {
                variant: name.clone(),
                seed,
                metrics: report.metrics,
                penetration_mm: report.penetration_mm,
                sequences: report.sequences,
            });
        }
    }
    Ok(table)
}
