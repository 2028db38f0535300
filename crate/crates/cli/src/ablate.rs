use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use serde::Serialize;

use rigsfm::rotation::{decoupled_rotation_averaging, RotationField};
use rigsfm::scene::{CameraPose, ImageId, ReconstructionState, ViewGraph};
use rigsfm::synth::{pose_errors, trajectory_scale_error};
use rigsfm::translation::{run_ablation, AblationKind, TranslationStage};

use crate::config::PipelineConfig;
use crate::pipeline::{prepare, PipelineError};

pub const CSV_FILE: &str = "ablation.csv";
pub const JSON_FILE: &str = "ablation.json";

/// One variant's errors against ground truth, or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: String,
    pub error: String,
    pub converged: bool,
    pub num_images: Option<usize>,
    pub median_rotation_deg: Option<f64>,
    pub mean_rotation_deg: Option<f64>,
    pub max_rotation_deg: Option<f64>,
    pub median_position: Option<f64>,
    pub mean_position: Option<f64>,
    pub max_position: Option<f64>,
    pub trajectory_scale_error: Option<f64>,
}

impl AblationRow {
    fn failed(kind: AblationKind, error: String) -> Self {
        Self {
            variant: kind.name().to_string(),
            status: "failed".into(),
            error,
            converged: false,
            num_images: None,
            median_rotation_deg: None,
            mean_rotation_deg: None,
            max_rotation_deg: None,
            median_position: None,
            mean_position: None,
            max_position: None,
            trajectory_scale_error: None,
        }
    }
}

fn camera_poses(graph: &ViewGraph, rotations: &RotationField, out: &TranslationStage) -> Option<BTreeMap<ImageId, CameraPose>> {
    graph
        .images
        .keys()
        .map(|&i| {
            let center = out.positions.camera_center(graph, rotations, i)?;
            Some((i, CameraPose { rotation: rotations[&i], center }))
        })
        .collect()
}

fn row(kind: AblationKind, graph: &ViewGraph, rotations: &RotationField, truth: &ReconstructionState, config: &PipelineConfig) -> AblationRow {
    let out = match run_ablation(kind, graph, rotations, &config.translation_options()) {
        Ok(out) => out,
        Err(e) => return AblationRow::failed(kind, e.to_string()),
    };
    let Some(est) = camera_poses(graph, rotations, &out) else {
        return AblationRow::failed(kind, "incomplete camera centers".into());
    };
    let reference: BTreeMap<ImageId, CameraPose> = truth
        .camera_poses()
        .into_iter()
        .filter(|(i, _)| graph.images.contains_key(i))
        .collect();
    let report = match pose_errors(&est, &reference) {
        Ok(r) => r,
        Err(e) => return AblationRow::failed(kind, e.to_string()),
    };
    AblationRow {
        variant: kind.name().to_string(),
        status: "ok".into(),
        error: String::new(),
        converged: out.converged(),
        num_images: Some(report.num_images),
        median_rotation_deg: Some(report.median_rotation_deg),
        mean_rotation_deg: Some(report.mean_rotation_deg),
        max_rotation_deg: Some(report.max_rotation_deg),
        median_position: Some(report.median_position),
        mean_position: Some(report.mean_position),
        max_position: Some(report.max_position),
        trajectory_scale_error: Some(trajectory_scale_error(&out.positions.unit_position, &truth.unit_position)),
    }
}

/// Runs the given translation objectives on one set of rotations. Rotations
/// are estimated from the graph unless given.
pub fn ablate(
    graph: &ViewGraph,
    truth: &ReconstructionState,
    config: &PipelineConfig,
    rotations: Option<&RotationField>,
    kinds: &[AblationKind],
) -> Result<Vec<AblationRow>, PipelineError> {
    let (graph, _) = prepare(graph)?;
    let estimated;
    let rotations = match rotations {
        Some(r) => r,
        None => {
            estimated = decoupled_rotation_averaging(&graph, &config.rotation)
                .map_err(|e| PipelineError::Stage {
                    stage: "rotation".into(),
                    message: e.to_string(),
                })?
                .cameras;
            &estimated
        }
    };
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        info!("ablation variant {}", kind.name());
        let r = row(kind, &graph, rotations, truth, config);
        if r.status != "ok" {
            warn!("{} failed: {}", r.variant, r.error);
        }
        rows.push(r);
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> Result<String, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| PipelineError::Internal(e.to_string()))
}

pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Internal(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::write(dir.join(CSV_FILE), to_csv(rows)?).map_err(io)?;
    let json = serde_json::to_string_pretty(rows).map_err(|e| PipelineError::Internal(e.to_string()))?;
    std::fs::write(dir.join(JSON_FILE), json + "\n").map_err(io)
}
