use std::path::Path;

use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use rigsfm::ba::{bundle_adjust, observations_from_graph};
use rigsfm::rotation::{decoupled_rotation_averaging, RotationStage};
use rigsfm::scene::largest_connected_component;
use rigsfm::scene::io::{parse_view_graph, write_state, IMAGE_POSES_FILE, POINTS_FILE, RIG_FILE, UNIT_POSES_FILE};
use rigsfm::scene::{RigCalibration, ReconstructionState, ViewGraph};
use rigsfm::translation::{
    init_positions_l1, joint_refine, refine_positions_angle, triangulate_l1, PointField, PositionField, StageReport,
};

use crate::config::{PipelineConfig, Skippable};

pub const REPORT_FILE: &str = "report.json";
pub const ERROR_FILE: &str = "error.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("input error: {0}")]
    Input(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Input(_) => 2,
            PipelineError::Stage { .. } => 3,
            PipelineError::Internal(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Input(_) => "input_error",
            PipelineError::Stage { .. } => "solver_failure",
            PipelineError::Internal(_) => "internal_error",
        }
    }

    /// Machine-readable error record.
    pub fn record(&self, partial_artifacts: &[&str]) -> Value {
        let stage = match self {
            PipelineError::Stage { stage, .. } => Some(stage.as_str()),
            _ => None,
        };
        json!({
            "status": "error",
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "stage": stage,
            "message": self.to_string(),
            "partial_artifacts": partial_artifacts,
        })
    }
}

fn stage_error(stage: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

/// One entry of the stage report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub termination: String,
    pub details: Value,
}

impl StageRecord {
    fn plain(name: &str, details: Value) -> Self {
        Self {
            name: name.to_string(),
            objective_before: None,
            objective_after: None,
            iterations: 0,
            converged: true,
            termination: "closed_form".to_string(),
            details,
        }
    }

    fn from_translation(r: &StageReport) -> Self {
        Self {
            name: r.stage.clone(),
            objective_before: Some(r.objective_before),
            objective_after: Some(r.objective_after),
            iterations: r.iterations,
            converged: r.converged,
            termination: r.termination.clone(),
            details: json!({
                "residuals": r.residuals,
                "points_in": r.points_in,
                "points_out": r.points_out,
                "dropped_collinear": r.dropped_collinear,
                "dropped_depth": r.dropped_depth,
                "dropped_angle": r.dropped_angle,
                "dropped_tracks": r.dropped_tracks,
            }),
        }
    }
}

/// Result of running the stages in memory.
#[derive(Debug, Clone)]
pub struct Run {
    /// The largest connected component that was solved.
    pub graph: ViewGraph,
    pub dropped_images: usize,
    pub state: Option<ReconstructionState>,
    pub records: Vec<StageRecord>,
}

fn state_of(graph: &ViewGraph, rot: &RotationStage, positions: &PositionField, points: PointField) -> ReconstructionState {
    ReconstructionState {
        images: graph.images.clone(),
        unit_rotation: rot.units.clone(),
        unit_position: positions.unit_position.clone(),
        rig: RigCalibration {
            rotation: rot.rig.clone(),
            translation: positions.internal_translation.clone(),
        },
        points,
        intrinsics: graph.intrinsics.clone(),
    }
}

/// Checks a parsed view graph and keeps its largest connected component.
pub fn prepare(graph: &ViewGraph) -> Result<(ViewGraph, usize), PipelineError> {
    let violations = graph.validate();
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().take(10).map(|v| v.to_string()).collect();
        return Err(PipelineError::Input(format!(
            "{} invalid entries: {}",
            violations.len(),
            msgs.join("; ")
        )));
    }
    let component = largest_connected_component(graph).map_err(|e| PipelineError::Input(e.to_string()))?;
    let dropped = graph.images.len() - component.images.len();
    Ok((component, dropped))
}

/// Runs every stage on a parsed view graph. On failure the error comes with
/// whatever was computed before it.
pub fn run_stages(graph: &ViewGraph, config: &PipelineConfig) -> Result<Run, (PipelineError, Run)> {
    let (component, dropped) = match prepare(graph) {
        Ok(v) => v,
        Err(e) => {
            let run = Run {
                graph: graph.clone(),
                dropped_images: 0,
                state: None,
                records: Vec::new(),
            };
            return Err((e, run));
        }
    };
    let mut run = Run {
        graph: component,
        dropped_images: dropped,
        state: None,
        records: Vec::new(),
    };
    match stages(&mut run, config) {
        Ok(()) => Ok(run),
        Err(e) => Err((e, run)),
    }
}

fn stages(run: &mut Run, config: &PipelineConfig) -> Result<(), PipelineError> {
    let graph = run.graph.clone();
    let anchor = graph
        .anchor_unit()
        .ok_or_else(|| PipelineError::Input("view graph has no units".into()))?;
    run.records.push(StageRecord::plain(
        "largest_component",
        json!({"images": graph.images.len(), "dropped_images": run.dropped_images, "edges": graph.edges.len(), "tracks": graph.tracks.len()}),
    ));

    info!("rotation averaging over {} images", graph.images.len());
    let rot = decoupled_rotation_averaging(&graph, &config.rotation).map_err(|e| stage_error("rotation", e))?;
    let (camera_reports, unit_report) = rot.reports.split_at(rot.reports.len().saturating_sub(1));
    for (k, r) in camera_reports.iter().enumerate() {
        run.records.push(StageRecord {
            name: "camera_rotations".into(),
            objective_before: None,
            objective_after: None,
            iterations: r.irls_iterations,
            converged: r.irls_converged,
            termination: if r.irls_converged { "tolerance" } else { "max_iterations" }.into(),
            details: json!({"component": k, "report": r}),
        });
    }
    run.records.push(StageRecord::plain("internal_rotations", json!({"slots": rot.rig.len()})));
    if let Some(r) = unit_report.first() {
        run.records.push(StageRecord {
            name: "unit_rotations".into(),
            objective_before: None,
            objective_after: None,
            iterations: r.irls_iterations,
            converged: r.irls_converged,
            termination: if r.irls_converged { "tolerance" } else { "max_iterations" }.into(),
            details: json!({"report": r}),
        });
    }
    run.records.push(StageRecord::plain("compose_rotations", json!({"images": rot.cameras.len()})));

    let topts = config.translation_options();
    info!("L1 position initialization");
    let (mut positions, _, report) =
        init_positions_l1(&graph, &rot.cameras, &topts.admm).map_err(|e| stage_error("init_l1", e))?;
    positions.reanchor(anchor, None);
    run.records.push(StageRecord::from_translation(&report));

    if !config.skips(Skippable::RefineAngle) {
        info!("angle refinement");
        let (mut refined, report) =
            refine_positions_angle(&graph, &rot.cameras, &positions, &topts).map_err(|e| stage_error("refine_angle", e))?;
        refined.reanchor(anchor, None);
        positions = refined;
        run.records.push(StageRecord::from_translation(&report));
    }

    info!("triangulation");
    let (mut points, report) =
        triangulate_l1(&graph, &rot.cameras, &positions, &topts).map_err(|e| stage_error("triangulate_l1", e))?;
    run.records.push(StageRecord::from_translation(&report));

    if !config.skips(Skippable::JointAngle) {
        info!("joint refinement of {} points", points.len());
        let (mut refined, mut refined_points, report) = joint_refine(&graph, &rot.cameras, &positions, &points, &topts)
            .map_err(|e| stage_error("joint_angle", e))?;
        refined.reanchor(anchor, Some(&mut refined_points));
        positions = refined;
        points = refined_points;
        run.records.push(StageRecord::from_translation(&report));
    }
    let state = state_of(&graph, &rot, &positions, points);
    run.state = Some(state.clone());

    if config.skips(Skippable::Ba) {
        return Ok(());
    }
    let obs = observations_from_graph(&graph, &state);
    info!("bundle adjustment over {} observations", obs.len());
    let (adjusted, kept, report) = bundle_adjust(&state, &obs, &config.ba).map_err(|e| stage_error("ba", e))?;
    let ba_record = |r: &rigsfm::ba::BaStageReport| StageRecord {
        name: format!("ba_{}", r.stage),
        objective_before: Some(r.initial_cost),
        objective_after: Some(r.final_cost),
        iterations: r.iterations,
        converged: r.converged,
        termination: r.termination.clone(),
        details: json!({
            "observations": r.observations,
            "inliers": r.inliers,
            "behind_camera": r.behind_camera,
            "initial_rmse_px": r.initial_rmse_px,
            "final_rmse_px": r.final_rmse_px,
        }),
    };
    let (first, second) = (&report.stages[0], &report.stages[1]);
    run.records.push(ba_record(first));
    run.records.push(StageRecord {
        name: "filter".into(),
        objective_before: Some(first.final_cost),
        objective_after: Some(second.initial_cost),
        iterations: 0,
        converged: true,
        termination: "closed_form".into(),
        details: serde_json::to_value(&report.filter).unwrap_or(Value::Null),
    });
    run.records.push(ba_record(second));
    info!("kept {} of {} observations", kept.len(), obs.len());
    run.state = Some(adjusted);
    Ok(())
}

fn report_json(run: &Run, config: &PipelineConfig, status: &str, partial: bool, artifacts: &[&str]) -> Value {
    json!({
        "status": status,
        "partial": partial,
        "artifacts": artifacts,
        "images": run.graph.images.len(),
        "dropped_images": run.dropped_images,
        "points": run.state.as_ref().map(|s| s.points.len()),
        "config": config,
        "stages": run.records,
    })
}

fn write_json(path: &Path, v: &Value) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| PipelineError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| PipelineError::Internal(format!("{}: {e}", path.display())))
}

const STATE_FILES: [&str; 4] = [IMAGE_POSES_FILE, UNIT_POSES_FILE, RIG_FILE, POINTS_FILE];

/// Reads a view graph, runs the pipeline and writes the artifacts.
///
/// Unreadable or invalid input fails before anything is written. A stage
/// failure writes `error.json`, the report and any state computed so far,
/// all marked partial.
pub fn solve(graph_path: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<Run, PipelineError> {
    let text = std::fs::read_to_string(graph_path)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", graph_path.display())))?;
    let graph = parse_view_graph(&text).map_err(|e| PipelineError::Input(e.to_string()))?;
    prepare(&graph)?;

    let result = run_stages(&graph, config);
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::Internal(format!("{}: {e}", out_dir.display())))?;
    let (run, failure) = match result {
        Ok(run) => (run, None),
        Err((e, run)) => (run, Some(e)),
    };
    let mut artifacts: Vec<&str> = vec![REPORT_FILE];
    if let Some(state) = &run.state {
        write_state(out_dir, state).map_err(|e| PipelineError::Internal(e.to_string()))?;
        artifacts.extend(STATE_FILES);
    }
    match failure {
        None => {
            write_json(&out_dir.join(REPORT_FILE), &report_json(&run, config, "ok", false, &artifacts))?;
            Ok(run)
        }
        Some(e) => {
            write_json(&out_dir.join(REPORT_FILE), &report_json(&run, config, "failed", true, &artifacts))?;
            write_json(&out_dir.join(ERROR_FILE), &e.record(&artifacts))?;
            Err(e)
        }
    }
}
