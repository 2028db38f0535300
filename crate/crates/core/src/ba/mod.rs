//! Multi-camera bundle adjustment over rig rotations and translations, unit
//! poses and points, with the two-round schedule and observation filtering.

mod cost;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{ImageId, IntrinsicsId, PointId, ReconstructionState, SlotId, UnitId, ViewGraph};
use crate::so3::Rot3;
use crate::solver::{levenberg_marquardt, BlockId, LmOptions, LmStatus, Problem, RobustKernel, SolverError};
use crate::Scalar;

pub use cost::{CameraReprojectionCost, ReprojectionCost};

/// Camera-frame depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BaError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("no valid observations")]
    NoObservations,
    #[error("observation references missing {0}")]
    Missing(String),
    #[error("invalid options: {0}")]
    Options(&'static str),
}

/// Pinhole intrinsics in any scalar type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pinhole<T: Scalar> {
    pub focal: T,
    pub cx: T,
    pub cy: T,
}

impl From<&crate::scene::Intrinsics> for Pinhole<f64> {
    fn from(k: &crate::scene::Intrinsics) -> Self {
        Self {
            focal: k.focal,
            cx: k.cx,
            cy: k.cy,
        }
    }
}

impl<T: Scalar> Pinhole<T> {
    /// Pixel of a camera-frame point; `None` when `z <= MIN_DEPTH`.
    pub fn project(&self, x: &Vector3<T>) -> Option<Vector2<T>> {
        if x.z <= T::lit(MIN_DEPTH) {
            return None;
        }
        Some(Vector2::new(
            self.focal * x.x / x.z + self.cx,
            self.focal * x.y / x.z + self.cy,
        ))
    }
}

/// `pi(R^r R^g (p - c^g) + t^r)`; `None` flags a point behind the camera.
pub fn reproject<T: Scalar>(
    intr: &Pinhole<T>,
    rig_rot: &Rot3<T>,
    rig_trans: &Vector3<T>,
    unit_rot: &Rot3<T>,
    unit_pos: &Vector3<T>,
    point: &Vector3<T>,
) -> Option<Vector2<T>> {
    let x = rig_rot.act(&unit_rot.act(&(point - unit_pos))) + rig_trans;
    intr.project(&x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image: ImageId,
    pub point: PointId,
    pub pixel: Vector2<f64>,
}

/// Observations of every track whose image and point exist in `state`.
/// Bearings become ideal pixels through the image intrinsics.
pub fn observations_from_graph(graph: &ViewGraph, state: &ReconstructionState) -> Vec<Observation> {
    let mut out = Vec::new();
    for track in &graph.tracks {
        if !state.points.contains_key(&track.point) {
            continue;
        }
        for obs in &track.observations {
            if !state.images.contains_key(&obs.image) {
                continue;
            }
            if let Some(pixel) = graph.observation_pixel(obs) {
                out.push(Observation {
                    image: obs.image,
                    point: track.point,
                    pixel,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaStage {
    RotationsFixed,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaOptions {
    pub huber_px: f64,
    /// Reprojection threshold of the filter between the two rounds.
    pub max_px_filter: f64,
    /// Focal lengths join the second round.
    pub refine_intrinsics: bool,
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    pub parallel: bool,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            huber_px: 2.0,
            max_px_filter: 8.0,
            refine_intrinsics: false,
            max_iterations: 100,
            function_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
            parameter_tolerance: 1e-12,
            parallel: true,
        }
    }
}

impl BaOptions {
    fn lm(&self) -> LmOptions {
        LmOptions {
            max_iterations: self.max_iterations,
            function_tolerance: self.function_tolerance,
            gradient_tolerance: self.gradient_tolerance,
            parameter_tolerance: self.parameter_tolerance,
            parallel: self.parallel,
            ..LmOptions::default()
        }
    }

    fn validate(&self) -> Result<(), BaError> {
        if !(self.huber_px > 0.0) {
            return Err(BaError::Options("huber_px must be positive"));
        }
        if !(self.max_px_filter > 0.0) {
            return Err(BaError::Options("max_px_filter must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaStageReport {
    pub stage: String,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: String,
    pub observations: usize,
    /// Active observations within the Huber scale at the end of the stage.
    pub inliers: usize,
    pub behind_camera: usize,
    pub initial_rmse_px: f64,
    pub final_rmse_px: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub observations_in: usize,
    pub observations_out: usize,
    pub dropped_reprojection: usize,
    pub dropped_behind: usize,
    pub dropped_points: usize,
    pub dropped_point_observations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    pub stages: Vec<BaStageReport>,
    pub filter: Option<FilterReport>,
}

/// Reprojection error in pixels, `None` when behind the camera or unknown.
pub fn reprojection_error(state: &ReconstructionState, obs: &Observation) -> Option<f64> {
    let node = state.images.get(&obs.image)?;
    let intr = Pinhole::from(state.intrinsics.get(&node.intrinsics)?);
    let px = reproject(
        &intr,
        state.rig.rotation.get(&node.slot)?,
        state.rig.translation.get(&node.slot)?,
        state.unit_rotation.get(&node.unit)?,
        state.unit_position.get(&node.unit)?,
        state.points.get(&obs.point)?,
    )?;
    Some((px - obs.pixel).norm())
}

fn rmse(state: &ReconstructionState, obs: &[Observation]) -> f64 {
    let errs: Vec<f64> = obs.iter().filter_map(|o| reprojection_error(state, o)).collect();
    if errs.is_empty() {
        return 0.0;
    }
    (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
}

/// Drops observations beyond `max_px` or behind their camera, then points
/// left with fewer than 2 observations or fewer than 2 distinct units.
pub fn filter_observations(
    state: &ReconstructionState,
    observations: &[Observation],
    max_px: f64,
) -> (Vec<Observation>, FilterReport) {
    let mut report = FilterReport {
        observations_in: observations.len(),
        ..FilterReport::default()
    };
    let mut kept = Vec::with_capacity(observations.len());
    for o in observations {
        match reprojection_error(state, o) {
            None => report.dropped_behind += 1,
            Some(e) if e > max_px => report.dropped_reprojection += 1,
            Some(_) => kept.push(*o),
        }
    }
    let mut support: BTreeMap<PointId, (usize, BTreeSet<UnitId>)> = BTreeMap::new();
    for o in &kept {
        let entry = support.entry(o.point).or_default();
        entry.0 += 1;
        if let Some(n) = state.images.get(&o.image) {
            entry.1.insert(n.unit);
        }
    }
    let bad: BTreeSet<PointId> = support
        .iter()
        .filter(|(_, (n, units))| *n < 2 || units.len() < 2)
        .map(|(p, _)| *p)
        .collect();
    let before = kept.len();
    kept.retain(|o| !bad.contains(&o.point));
    report.dropped_points = bad.len();
    report.dropped_point_observations = before - kept.len();
    report.observations_out = kept.len();
    (kept, report)
}

struct BaVars {
    rig_rot: BTreeMap<SlotId, BlockId>,
    rig_trans: BTreeMap<SlotId, BlockId>,
    unit_rot: BTreeMap<UnitId, BlockId>,
    unit_pos: BTreeMap<UnitId, BlockId>,
    points: BTreeMap<PointId, BlockId>,
    focal: BTreeMap<IntrinsicsId, BlockId>,
}

fn require<'a, K: Ord + std::fmt::Display, V>(map: &'a BTreeMap<K, V>, k: &K, what: &str) -> Result<&'a V, BaError> {
    map.get(k).ok_or_else(|| BaError::Missing(format!("{what} {k}")))
}

/// One round of multi-camera bundle adjustment.
///
/// Observations behind their camera at the start are left out and counted.
/// The anchor unit pose and the reference slot pose never change; in the
/// `RotationsFixed` stage no rotation changes.
pub fn multi_camera_ba(
    state: &ReconstructionState,
    observations: &[Observation],
    stage: BaStage,
    opts: &BaOptions,
) -> Result<(ReconstructionState, BaStageReport), BaError> {
    opts.validate()?;
    let anchor = state.unit_rotation.keys().next().copied().ok_or(BaError::NoObservations)?;
    let reference = state.rig.rotation.keys().next().copied().ok_or(BaError::NoObservations)?;
    let mut active = Vec::with_capacity(observations.len());
    let mut behind = 0;
    for o in observations {
        let node = require(&state.images, &o.image, "image")?;
        require(&state.points, &o.point, "point")?;
        require(&state.unit_rotation, &node.unit, "unit")?;
        require(&state.rig.rotation, &node.slot, "slot")?;
        require(&state.intrinsics, &node.intrinsics, "intrinsics")?;
        if reprojection_error(state, o).is_some() {
            active.push(*o);
        } else {
            behind += 1;
        }
    }
    if active.is_empty() {
        return Err(BaError::NoObservations);
    }

    let mut problem = Problem::new();
    let rotations_free = stage == BaStage::Full;
    let mut vars = BaVars {
        rig_rot: BTreeMap::new(),
        rig_trans: BTreeMap::new(),
        unit_rot: BTreeMap::new(),
        unit_pos: BTreeMap::new(),
        points: BTreeMap::new(),
        focal: BTreeMap::new(),
    };
    for (&s, r) in &state.rig.rotation {
        let b = problem.add_rotation(r);
        problem.set_constant(b, !rotations_free || s == reference);
        vars.rig_rot.insert(s, b);
        let t = require(&state.rig.translation, &s, "slot translation")?;
        let b = problem.add_euclidean(t.as_slice());
        problem.set_constant(b, s == reference);
        vars.rig_trans.insert(s, b);
    }
    for (&u, r) in &state.unit_rotation {
        let b = problem.add_rotation(r);
        problem.set_constant(b, !rotations_free || u == anchor);
        vars.unit_rot.insert(u, b);
        let c = require(&state.unit_position, &u, "unit position")?;
        let b = problem.add_euclidean(c.as_slice());
        problem.set_constant(b, u == anchor);
        vars.unit_pos.insert(u, b);
    }
    let refine_focal = opts.refine_intrinsics && stage == BaStage::Full;
    for (&k, intr) in &state.intrinsics {
        let b = problem.add_euclidean(&[intr.focal]);
        problem.set_constant(b, !refine_focal);
        vars.focal.insert(k, b);
    }
    let used: BTreeSet<PointId> = active.iter().map(|o| o.point).collect();
    for p in &used {
        let b = problem.add_euclidean(state.points[p].as_slice());
        problem.set_elimination_group(b, 0);
        vars.points.insert(*p, b);
    }
    let kernel = RobustKernel::huber(opts.huber_px);
    for o in &active {
        let node = &state.images[&o.image];
        let intr = &state.intrinsics[&node.intrinsics];
        let blocks = vec![
            vars.rig_rot[&node.slot],
            vars.rig_trans[&node.slot],
            vars.unit_rot[&node.unit],
            vars.unit_pos[&node.unit],
            vars.points[&o.point],
            vars.focal[&node.intrinsics],
        ];
        let cost = ReprojectionCost {
            observed: o.pixel,
            cx: intr.cx,
            cy: intr.cy,
        };
        problem.add_term(blocks, Box::new(cost), kernel)?;
    }

    let initial_rmse = rmse(state, &active);
    let summary = levenberg_marquardt(&mut problem, &opts.lm())?;
    let mut out = state.clone();
    for (s, &b) in &vars.rig_rot {
        out.rig.rotation.insert(*s, problem.rotation(b));
    }
    for (s, &b) in &vars.rig_trans {
        out.rig.translation.insert(*s, problem.vector3(b));
    }
    for (u, &b) in &vars.unit_rot {
        out.unit_rotation.insert(*u, problem.rotation(b));
    }
    for (u, &b) in &vars.unit_pos {
        out.unit_position.insert(*u, problem.vector3(b));
    }
    for (p, &b) in &vars.points {
        out.points.insert(*p, problem.vector3(b));
    }
    for (k, &b) in &vars.focal {
        if let Some(intr) = out.intrinsics.get_mut(k) {
            intr.focal = problem.values(b)[0];
        }
    }
    let inliers = active
        .iter()
        .filter(|o| reprojection_error(&out, o).is_some_and(|e| e <= opts.huber_px))
        .count();
    let report = BaStageReport {
        stage: match stage {
            BaStage::RotationsFixed => "rotations_fixed",
            BaStage::Full => "full",
        }
        .to_string(),
        initial_cost: summary.initial_cost,
        final_cost: summary.final_cost,
        iterations: summary.iterations,
        converged: summary.status.converged() || summary.status == LmStatus::Trivial,
        termination: format!("{:?}", summary.status),
        observations: active.len(),
        inliers,
        behind_camera: behind,
        initial_rmse_px: initial_rmse,
        final_rmse_px: rmse(&out, &active),
    };
    Ok((out, report))
}

/// Rotations-fixed round, filter, full round.
pub fn bundle_adjust(
    state: &ReconstructionState,
    observations: &[Observation],
    opts: &BaOptions,
) -> Result<(ReconstructionState, Vec<Observation>, BaReport), BaError> {
    let (s1, r1) = multi_camera_ba(state, observations, BaStage::RotationsFixed, opts)?;
    let (kept, filter) = filter_observations(&s1, observations, opts.max_px_filter);
    let mut s1 = s1;
    let live: BTreeSet<PointId> = kept.iter().map(|o| o.point).collect();
    s1.points.retain(|p, _| live.contains(p));
    let (s2, r2) = multi_camera_ba(&s1, &kept, BaStage::Full, opts)?;
    Ok((
        s2,
        kept,
        BaReport {
            stages: vec![r1, r2],
            filter: Some(filter),
        },
    ))
}

/// Ordinary bundle adjustment over independent camera poses: one rotation
/// and center per image, the lowest image held fixed.
pub fn ordinary_ba(
    poses: &BTreeMap<ImageId, crate::scene::CameraPose>,
    intrinsics: &BTreeMap<ImageId, crate::scene::Intrinsics>,
    points: &BTreeMap<PointId, Vector3<f64>>,
    observations: &[Observation],
    rotations_free: bool,
    opts: &BaOptions,
) -> Result<(BTreeMap<ImageId, crate::scene::CameraPose>, BTreeMap<PointId, Vector3<f64>>, BaStageReport), BaError> {
    opts.validate()?;
    let anchor = *poses.keys().next().ok_or(BaError::NoObservations)?;
    let mut problem = Problem::new();
    let mut rot = BTreeMap::new();
    let mut cen = BTreeMap::new();
    for (&i, p) in poses {
        let b = problem.add_rotation(&p.rotation);
        problem.set_constant(b, !rotations_free || i == anchor);
        rot.insert(i, b);
        let b = problem.add_euclidean(p.center.as_slice());
        problem.set_constant(b, i == anchor);
        cen.insert(i, b);
    }
    let mut pts = BTreeMap::new();
    let mut used = Vec::new();
    for o in observations {
        let pose = require(poses, &o.image, "image")?;
        let p = require(points, &o.point, "point")?;
        let intr = Pinhole::from(require(intrinsics, &o.image, "intrinsics")?);
        if intr.project(&pose.rotation.act(&(p - pose.center))).is_some() {
            used.push(*o);
        }
    }
    if used.is_empty() {
        return Err(BaError::NoObservations);
    }
    for o in &used {
        pts.entry(o.point).or_insert_with(|| {
            let b = problem.add_euclidean(points[&o.point].as_slice());
            problem.set_elimination_group(b, 0);
            b
        });
    }
    let kernel = RobustKernel::huber(opts.huber_px);
    for o in &used {
        let k = &intrinsics[&o.image];
        let cost = CameraReprojectionCost {
            observed: o.pixel,
            focal: k.focal,
            cx: k.cx,
            cy: k.cy,
        };
        problem.add_term(vec![rot[&o.image], cen[&o.image], pts[&o.point]], Box::new(cost), kernel)?;
    }
    let summary = levenberg_marquardt(&mut problem, &opts.lm())?;
    let out_poses = poses
        .keys()
        .map(|i| {
            (
                *i,
                crate::scene::CameraPose {
                    rotation: problem.rotation(rot[i]),
                    center: problem.vector3(cen[i]),
                },
            )
        })
        .collect();
    let mut out_points = points.clone();
    for (p, &b) in &pts {
        out_points.insert(*p, problem.vector3(b));
    }
    let report = BaStageReport {
        stage: if rotations_free { "full" } else { "rotations_fixed" }.to_string(),
        initial_cost: summary.initial_cost,
        final_cost: summary.final_cost,
        iterations: summary.iterations,
        converged: summary.status.converged() || summary.status == LmStatus::Trivial,
        termination: format!("{:?}", summary.status),
        observations: used.len(),
        behind_camera: observations.len() - used.len(),
        ..BaStageReport::default()
    };
    Ok((out_poses, out_points, report))
}
