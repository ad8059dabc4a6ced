//! Synthesis, training and evaluation in one call, plus component ablations.

use crate::error::Result;
use crate::metrics::{evaluate, EvalReport};
use crate::synth::{make_object, ObjectSpec, SynthObject};
use crate::trainer::{fit, TrainConfig, TrainedModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub object: SynthObject,
    pub model: TrainedModel,
    pub report: EvalReport,
}

pub fn run_pipeline(spec: &ObjectSpec, cfg: &TrainConfig) -> Result<PipelineOutput> {
    let object = make_object(spec)?;
    for w in &object.warnings {
        log::warn!("{w}");
    }
    let model = fit(&object.state0, &object.state1, cfg)?;
    let report = evaluate(&model, &object.state0, &object.state1, &object.gt)?;
    Ok(PipelineOutput { object, model, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// A single part slot, so every Gaussian shares one transform.
    NoPartEmbeddings,
    NoRepel,
    NoPhysics,
    /// Fixed β = 0.5 instead of the motion-aware blend.
    NoMotionAwareBeta,
}

impl Ablation {
    pub const TOGGLES: [Ablation; 4] =
        [Ablation::NoPartEmbeddings, Ablation::NoRepel, Ablation::NoPhysics, Ablation::NoMotionAwareBeta];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPartEmbeddings => "no-part-embeddings",
            Ablation::NoRepel => "no-repel",
            Ablation::NoPhysics => "no-physics",
            Ablation::NoMotionAwareBeta => "no-motion-aware-beta",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoPartEmbeddings => c.k_parts = 1,
            Ablation::NoRepel => c.repel.enabled = false,
            Ablation::NoPhysics => c.weights.lambda_phys = 0.0,
            Ablation::NoMotionAwareBeta => c.fusion.adaptive_beta = false,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub report: EvalReport,
}

/// The full model followed by each toggle in `toggles`.
pub fn ablate(spec: &ObjectSpec, cfg: &TrainConfig, toggles: &[Ablation]) -> Result<Vec<AblationRow>> {
    let object = make_object(spec)?;
    let mut rows = Vec::with_capacity(toggles.len() + 1);
    for &ablation in std::iter::once(&Ablation::Full).chain(toggles) {
        let model = fit(&object.state0, &object.state1, &ablation.apply(cfg))?;
        let report = evaluate(&model, &object.state0, &object.state1, &object.gt)?;
        rows.push(AblationRow { ablation, report });
    }
    Ok(rows)
}

/// One row per toggle with `toggled − full` for each aggregate metric.
pub fn ablation_delta_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "ablation,d_ang_err,d_pos_err,d_motion_err,d_rel_motion_err,d_cd_static,d_cd_movable,d_cd_whole,d_part_accuracy,d_penetration\n",
    );
    let Some(full) = rows.iter().find(|r| r.ablation == Ablation::Full) else {
        return out;
    };
    let metrics = |r: &EvalReport| {
        [
            r.mean_ang_err(),
            r.mean_pos_err(),
            r.mean_motion_err(),
            r.mean_relative_motion_err(),
            r.cd_static,
            r.cd_movable,
            r.cd_whole,
            r.part_accuracy,
            r.penetration,
        ]
    };
    let base = metrics(&full.report);
    for row in rows.iter().filter(|r| r.ablation != Ablation::Full) {
        out.push_str(row.ablation.name());
        for (v, b) in metrics(&row.report).iter().zip(&base) {
            out.push_str(&format!(",{:.6}", v - b));
        }
        out.push('\n');
    }
    out
}
