//! Unit positions, internal translations and points from fixed rotations.
//!
//! The hybrid pipeline runs an L1 distance initialization over relative
//! translations, a non-bilinear angle refinement of the positions, L1
//! cross-product triangulation and a joint angle refinement of positions and
//! points. The alternative objectives are exposed through [`AblationKind`].

mod costs;
mod init;
mod refine;
mod triangulate;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::RotationField;
use crate::scene::{ImageId, PointId, SceneError, SlotId, UnitId, ViewGraph};
use crate::solver::{AdmmOptions, LmOptions, SolverError};

pub use costs::{DirectionCost, LinearCombination, ScaledDirectionCost, TermBuilder, MIN_DIRECTION_NORM};
pub use init::init_positions_l1;
pub use refine::{
    joint_refine, joint_refine_bilinear, random_initialization, refine_positions_angle,
    refine_positions_bilinear,
};
pub use triangulate::{triangulate_l1, triangulate_point, TriangulationOutcome};

pub type PointField = BTreeMap<PointId, Vector3<f64>>;
/// `s_ij >= 1` per edge index of the view graph.
pub type BaselineScale = BTreeMap<usize, f64>;

#[derive(Debug, Error)]
pub enum TranslationError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("no rotation for image {0}")]
    MissingRotation(ImageId),
    #[error("no position for {0}")]
    MissingPosition(String),
    #[error("non-finite initial {0}")]
    NonFinite(&'static str),
    #[error("nothing to estimate: {0}")]
    Empty(&'static str),
}

/// `c^g` per unit and `t^r` per slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositionField {
    pub unit_position: BTreeMap<UnitId, Vector3<f64>>,
    pub internal_translation: BTreeMap<SlotId, Vector3<f64>>,
}

impl PositionField {
    /// Zero positions and translations for every unit and slot of the graph.
    pub fn zeros(graph: &ViewGraph) -> Self {
        Self {
            unit_position: graph.units().into_keys().map(|u| (u, Vector3::zeros())).collect(),
            internal_translation: graph.slots().into_iter().map(|s| (s, Vector3::zeros())).collect(),
        }
    }

    /// `c_i = c^g - R_i^T t^r`.
    pub fn camera_center(&self, graph: &ViewGraph, rotations: &RotationField, image: ImageId) -> Option<Vector3<f64>> {
        let node = graph.images.get(&image)?;
        let r = rotations.get(&image)?;
        let cg = self.unit_position.get(&node.unit)?;
        let tr = self.internal_translation.get(&node.slot)?;
        Some(cg - r.transpose().act(tr))
    }

    pub fn is_finite(&self) -> bool {
        self.unit_position.values().chain(self.internal_translation.values()).all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Moves the anchor unit to the origin, taking the points along.
    pub fn reanchor(&mut self, anchor: UnitId, points: Option<&mut PointField>) {
        let Some(&shift) = self.unit_position.get(&anchor) else {
            return;
        };
        if shift == Vector3::zeros() {
            return;
        }
        self.unit_position.values_mut().for_each(|c| *c -= shift);
        if let Some(points) = points {
            points.values_mut().for_each(|p| *p -= shift);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslationOptions {
    /// Cauchy scale of the relative-translation angle residuals (chordal units).
    pub cauchy_scale: f64,
    /// Cauchy scale of the track residuals, both joint objectives.
    pub track_cauchy_scale: f64,
    /// Tracks longer than this are subsampled; 0 disables subsampling.
    pub max_track_length: usize,
    pub min_triangulation_angle_deg: f64,
    /// Seed of the random initializations used by the track-only variants.
    pub seed: u64,
    pub admm: AdmmOptions,
    pub lm: LmOptions,
}

impl Default for TranslationOptions {
    fn default() -> Self {
        Self {
            cauchy_scale: 0.1,
            track_cauchy_scale: 0.02,
            max_track_length: 50,
            min_triangulation_angle_deg: 1.0,
            seed: 0,
            admm: AdmmOptions::default(),
            lm: LmOptions::default(),
        }
    }
}

/// Machine-readable summary of one stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: String,
    pub residuals: usize,
    pub points_in: usize,
    pub points_out: usize,
    pub dropped_collinear: usize,
    pub dropped_depth: usize,
    pub dropped_angle: usize,
    pub dropped_tracks: usize,
}

impl StageReport {
    pub(crate) fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            ..Self::default()
        }
    }
}

/// An observation turned into a world-frame ray.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ray {
    pub image: ImageId,
    pub unit: UnitId,
    pub slot: SlotId,
    /// `R_i^T`.
    pub rotation_t: Matrix3<f64>,
    /// `R_i^T f`.
    pub direction: Vector3<f64>,
}

/// Keeps the first and last entries plus evenly spaced ones in between.
pub(crate) fn subsample<T: Copy>(items: &[T], max: usize) -> Vec<T> {
    if max < 2 || items.len() <= max {
        return items.to_vec();
    }
    let n = items.len();
    (0..max)
        .map(|k| items[(k * (n - 1) + (max - 1) / 2) / (max - 1)])
        .collect()
}

/// World rays of every track with at least 2 posed observations spanning at
/// least 2 units, subsampled to `max_len`. Returns the rays and the number of
/// tracks skipped.
pub(crate) fn track_rays(
    graph: &ViewGraph,
    rotations: &RotationField,
    max_len: usize,
) -> (Vec<(PointId, Vec<Ray>)>, usize) {
    let mut out = Vec::with_capacity(graph.tracks.len());
    let mut skipped = 0;
    for track in &graph.tracks {
        let mut rays = Vec::with_capacity(track.observations.len());
        for obs in &track.observations {
            let (Some(node), Some(r)) = (graph.images.get(&obs.image), rotations.get(&obs.image)) else {
                continue;
            };
            let Some(f) = graph.observation_bearing(obs) else {
                continue;
            };
            let rotation_t = r.matrix().transpose();
            rays.push(Ray {
                image: obs.image,
                unit: node.unit,
                slot: node.slot,
                rotation_t,
                direction: rotation_t * f,
            });
        }
        let units: BTreeSet<UnitId> = rays.iter().map(|r| r.unit).collect();
        if rays.len() < 2 || units.len() < 2 {
            skipped += 1;
            continue;
        }
        out.push((track.point, subsample(&rays, max_len)));
    }
    (out, skipped)
}

/// The six translation objectives compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    TransOnlyBilinear,
    TransOnlyNonbilinear,
    TracksOnlyBilinear,
    TracksOnlyNonbilinear,
    HybridBilinear,
    HybridNonbilinear,
}

impl AblationKind {
    pub const ALL: [AblationKind; 6] = [
        AblationKind::TransOnlyBilinear,
        AblationKind::TransOnlyNonbilinear,
        AblationKind::TracksOnlyBilinear,
        AblationKind::TracksOnlyNonbilinear,
        AblationKind::HybridBilinear,
        AblationKind::HybridNonbilinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::TransOnlyBilinear => "trans_only_bilinear",
            AblationKind::TransOnlyNonbilinear => "trans_only_nonbilinear",
            AblationKind::TracksOnlyBilinear => "tracks_only_bilinear",
            AblationKind::TracksOnlyNonbilinear => "tracks_only_nonbilinear",
            AblationKind::HybridBilinear => "hybrid_bilinear",
            AblationKind::HybridNonbilinear => "hybrid_nonbilinear",
        }
    }
}

/// Output of a translation run.
#[derive(Debug, Clone, Default)]
pub struct TranslationStage {
    pub positions: PositionField,
    pub points: PointField,
    pub scales: BaselineScale,
    pub reports: Vec<StageReport>,
}

impl TranslationStage {
    /// True when every stage reached its termination criterion.
    pub fn converged(&self) -> bool {
        self.reports.iter().all(|r| r.converged)
    }
}

fn anchor_of(graph: &ViewGraph) -> Result<UnitId, TranslationError> {
    graph.anchor_unit().ok_or(TranslationError::Empty("view graph has no units"))
}

fn staged_init(
    graph: &ViewGraph,
    rotations: &RotationField,
    opts: &TranslationOptions,
    stage: &mut TranslationStage,
) -> Result<(), TranslationError> {
    let anchor = anchor_of(graph)?;
    let (mut positions, scales, report) = init_positions_l1(graph, rotations, &opts.admm)?;
    positions.reanchor(anchor, None);
    stage.reports.push(report);
    let (mut positions, report) = refine_positions_angle(graph, rotations, &positions, opts)?;
    positions.reanchor(anchor, None);
    stage.reports.push(report);
    let (points, report) = triangulate_l1(graph, rotations, &positions, opts)?;
    stage.reports.push(report);
    stage.positions = positions;
    stage.points = points;
    stage.scales = scales;
    Ok(())
}

/// Full hybrid pipeline: L1 init, angle refinement, triangulation, joint refinement.
pub fn hybrid_translation_averaging(
    graph: &ViewGraph,
    rotations: &RotationField,
    opts: &TranslationOptions,
) -> Result<TranslationStage, TranslationError> {
    run_ablation(AblationKind::HybridNonbilinear, graph, rotations, opts)
}

/// Runs one of the six translation objectives.
///
/// Track-based variants finish with the triangulated points; the relative
/// translation variants triangulate once at the end so that every variant
/// returns a point field.
pub fn run_ablation(
    kind: AblationKind,
    graph: &ViewGraph,
    rotations: &RotationField,
    opts: &TranslationOptions,
) -> Result<TranslationStage, TranslationError> {
    let anchor = anchor_of(graph)?;
    let mut stage = TranslationStage::default();
    match kind {
        AblationKind::TransOnlyBilinear | AblationKind::TransOnlyNonbilinear => {
            let (mut positions, scales, report) = init_positions_l1(graph, rotations, &opts.admm)?;
            positions.reanchor(anchor, None);
            stage.reports.push(report);
            let (mut positions, report) = if kind == AblationKind::TransOnlyBilinear {
                refine_positions_bilinear(graph, rotations, &positions, opts)?
            } else {
                refine_positions_angle(graph, rotations, &positions, opts)?
            };
            positions.reanchor(anchor, None);
            stage.reports.push(report);
            let (points, report) = triangulate_l1(graph, rotations, &positions, opts)?;
            stage.reports.push(report);
            stage.positions = positions;
            stage.points = points;
            stage.scales = scales;
        }
        AblationKind::TracksOnlyBilinear | AblationKind::TracksOnlyNonbilinear => {
            let (positions, points) = random_initialization(graph, rotations, opts);
            let (mut positions, mut points, report) = if kind == AblationKind::TracksOnlyBilinear {
                joint_refine_bilinear(graph, rotations, &positions, &points, opts)?
            } else {
                joint_refine(graph, rotations, &positions, &points, opts)?
            };
            positions.reanchor(anchor, Some(&mut points));
            stage.reports.push(report);
            stage.positions = positions;
            stage.points = points;
        }
        AblationKind::HybridBilinear | AblationKind::HybridNonbilinear => {
            staged_init(graph, rotations, opts, &mut stage)?;
            let (mut positions, mut points, report) = if kind == AblationKind::HybridBilinear {
                joint_refine_bilinear(graph, rotations, &stage.positions, &stage.points, opts)?
            } else {
                joint_refine(graph, rotations, &stage.positions, &stage.points, opts)?
            };
            positions.reanchor(anchor, Some(&mut points));
            stage.reports.push(report);
            stage.positions = positions;
            stage.points = points;
        }
    }
    Ok(stage)
}
