use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::rotation::RotationField;
use crate::scene::{PointId, SlotId, UnitId, ViewGraph};
use crate::solver::{levenberg_marquardt, BlockId, BlockKind, LmSummary, Problem, RobustKernel};

use super::costs::{DirectionCost, ScaledDirectionCost, TermBuilder};
use super::{track_rays, PointField, PositionField, StageReport, TranslationError, TranslationOptions};

// normal equations eliminate the scalar d unknowns first, then points
const POINT_GROUP: u32 = 1;
const CAMERA_GROUP: u32 = 2;

struct Vars {
    unit: BTreeMap<UnitId, BlockId>,
    slot: BTreeMap<SlotId, BlockId>,
    point: BTreeMap<PointId, BlockId>,
}

impl Vars {
    fn new(problem: &mut Problem, graph: &ViewGraph, positions: &PositionField) -> Result<Self, TranslationError> {
        if !positions.is_finite() {
            return Err(TranslationError::NonFinite("positions"));
        }
        let anchor = graph.anchor_unit().ok_or(TranslationError::Empty("view graph has no units"))?;
        let reference = graph.reference_slot().ok_or(TranslationError::Empty("view graph has no slots"))?;
        let mut unit = BTreeMap::new();
        for u in graph.units().into_keys() {
            let c = positions
                .unit_position
                .get(&u)
                .ok_or_else(|| TranslationError::MissingPosition(format!("unit {u}")))?;
            let b = problem.add_euclidean(c.as_slice());
            problem.set_constant(b, u == anchor);
            problem.set_elimination_group(b, CAMERA_GROUP);
            unit.insert(u, b);
        }
        let mut slot = BTreeMap::new();
        for s in graph.slots() {
            let t = positions
                .internal_translation
                .get(&s)
                .ok_or_else(|| TranslationError::MissingPosition(format!("slot {s}")))?;
            let b = problem.add_euclidean(t.as_slice());
            problem.set_constant(b, s == reference);
            problem.set_elimination_group(b, CAMERA_GROUP);
            slot.insert(s, b);
        }
        Ok(Self {
            unit,
            slot,
            point: BTreeMap::new(),
        })
    }

    fn add_points(&mut self, problem: &mut Problem, points: &PointField) -> Result<(), TranslationError> {
        for (&id, p) in points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(TranslationError::NonFinite("points"));
            }
            let b = problem.add_euclidean(p.as_slice());
            problem.set_elimination_group(b, POINT_GROUP);
            self.point.insert(id, b);
        }
        Ok(())
    }

    fn positions(&self, problem: &Problem) -> PositionField {
        PositionField {
            unit_position: self.unit.iter().map(|(&u, &b)| (u, problem.vector3(b))).collect(),
            internal_translation: self.slot.iter().map(|(&s, &b)| (s, problem.vector3(b))).collect(),
        }
    }

    fn points(&self, problem: &Problem) -> PointField {
        self.point.iter().map(|(&p, &b)| (p, problem.vector3(b))).collect()
    }
}

fn inverse_distance(c: &Vector3<f64>) -> f64 {
    (1.0 / c.norm()).clamp(1e-9, 1e9)
}

fn current(problem: &Problem, blocks: &[BlockId], coeffs: &[Matrix3<f64>]) -> Vector3<f64> {
    blocks
        .iter()
        .zip(coeffs)
        .fold(Vector3::zeros(), |acc, (&b, a)| acc + a * problem.vector3(b))
}

/// Adds one direction term; bilinear terms get their own nonnegative `d`.
fn add_direction(
    problem: &mut Problem,
    builder: TermBuilder,
    target: Vector3<f64>,
    bilinear: bool,
    kernel: RobustKernel,
) -> Result<(), TranslationError> {
    let (mut blocks, combination) = builder.finish();
    if blocks.is_empty() {
        return Ok(());
    }
    if bilinear {
        let d = inverse_distance(&current(problem, &blocks, &combination.coeffs));
        let db = problem.add_block(&[d], BlockKind::NonNegative);
        problem.set_elimination_group(db, 0);
        blocks.push(db);
        problem.add_term(blocks, Box::new(ScaledDirectionCost { target, combination }), kernel)?;
    } else {
        problem.add_term(blocks, Box::new(DirectionCost { target, combination }), kernel)?;
    }
    Ok(())
}

fn report_of(stage: &str, summary: &LmSummary, residuals: usize) -> StageReport {
    StageReport {
        objective_before: summary.initial_cost,
        objective_after: summary.final_cost,
        iterations: summary.iterations,
        converged: summary.status.converged(),
        termination: format!("{:?}", summary.status),
        residuals,
        ..StageReport::new(stage)
    }
}

fn refine_edges(
    graph: &ViewGraph,
    rotations: &RotationField,
    init: &PositionField,
    opts: &TranslationOptions,
    bilinear: bool,
) -> Result<(PositionField, StageReport), TranslationError> {
    let mut problem = Problem::new();
    let vars = Vars::new(&mut problem, graph, init)?;
    let kernel = RobustKernel::cauchy(opts.cauchy_scale);
    for e in &graph.edges {
        let (Some(ni), Some(nj)) = (graph.images.get(&e.i), graph.images.get(&e.j)) else {
            continue;
        };
        let (Some(ri), Some(rj)) = (rotations.get(&e.i), rotations.get(&e.j)) else {
            continue;
        };
        let (ri_t, rj_t) = (ri.matrix().transpose(), rj.matrix().transpose());
        let mut builder = TermBuilder::default();
        builder
            .add(vars.unit[&ni.unit], Matrix3::identity())
            .add(vars.unit[&nj.unit], -Matrix3::identity())
            .add(vars.slot[&nj.slot], rj_t)
            .add(vars.slot[&ni.slot], -ri_t);
        add_direction(&mut problem, builder, rj_t * e.translation, bilinear, kernel)?;
    }
    let n = problem.num_terms();
    let summary = levenberg_marquardt(&mut problem, &opts.lm)?;
    let name = if bilinear { "refine_bilinear" } else { "refine_angle" };
    Ok((vars.positions(&problem), report_of(name, &summary, n)))
}

/// Non-bilinear angle refinement of unit positions and internal translations,
/// `min sum rho(|R_j^T t_ij - C_ij / |C_ij||)`.
pub fn refine_positions_angle(
    graph: &ViewGraph,
    rotations: &RotationField,
    init: &PositionField,
    opts: &TranslationOptions,
) -> Result<(PositionField, StageReport), TranslationError> {
    refine_edges(graph, rotations, init, opts, false)
}

/// Bilinear variant `min sum rho(|R_j^T t_ij - d_ij C_ij|)`, `d_ij >= 0`.
pub fn refine_positions_bilinear(
    graph: &ViewGraph,
    rotations: &RotationField,
    init: &PositionField,
    opts: &TranslationOptions,
) -> Result<(PositionField, StageReport), TranslationError> {
    refine_edges(graph, rotations, init, opts, true)
}

fn refine_tracks(
    graph: &ViewGraph,
    rotations: &RotationField,
    init: &PositionField,
    points: &PointField,
    opts: &TranslationOptions,
    bilinear: bool,
) -> Result<(PositionField, PointField, StageReport), TranslationError> {
    let mut problem = Problem::new();
    let mut vars = Vars::new(&mut problem, graph, init)?;
    vars.add_points(&mut problem, points)?;
    let kernel = RobustKernel::cauchy(opts.track_cauchy_scale);
    let (tracks, skipped) = track_rays(graph, rotations, opts.max_track_length);
    let mut used = 0;
    for (point, rays) in &tracks {
        let Some(&pb) = vars.point.get(point) else {
            continue;
        };
        used += 1;
        for r in rays {
            let mut builder = TermBuilder::default();
            builder
                .add(pb, Matrix3::identity())
                .add(vars.unit[&r.unit], -Matrix3::identity())
                .add(vars.slot[&r.slot], r.rotation_t);
            add_direction(&mut problem, builder, r.direction, bilinear, kernel)?;
        }
    }
    let n = problem.num_terms();
    if n == 0 {
        return Err(TranslationError::Empty("no track observation with a point"));
    }
    let summary = levenberg_marquardt(&mut problem, &opts.lm)?;
    let name = if bilinear { "joint_bilinear" } else { "joint_angle" };
    let mut report = report_of(name, &summary, n);
    report.points_in = points.len();
    report.points_out = used;
    report.dropped_tracks = skipped;
    let refined: PointField = vars
        .points(&problem)
        .into_iter()
        .filter(|(p, _)| tracks.iter().any(|(q, _)| q == p))
        .collect();
    Ok((vars.positions(&problem), refined, report))
}

/// Joint non-bilinear refinement of unit positions, internal translations and
/// points, `min sum rho(|R_i^T f_ik - (p_k - c^g_i + R_i^T t^r_i) / |.||)`.
pub fn joint_refine(
    graph: &ViewGraph,
    rotations: &RotationField,
    positions: &PositionField,
    points: &PointField,
    opts: &TranslationOptions,
) -> Result<(PositionField, PointField, StageReport), TranslationError> {
    refine_tracks(graph, rotations, positions, points, opts, false)
}

/// Bilinear track objective `min sum rho(|R_i^T f_ik - d_ik (p_k - c_i)|)`, `d_ik >= 0`.
pub fn joint_refine_bilinear(
    graph: &ViewGraph,
    rotations: &RotationField,
    positions: &PositionField,
    points: &PointField,
    opts: &TranslationOptions,
) -> Result<(PositionField, PointField, StageReport), TranslationError> {
    refine_tracks(graph, rotations, positions, points, opts, true)
}

/// Unit positions and points uniform in the unit cube (anchor at the origin,
/// internal translations zero), for every eligible track.
pub fn random_initialization(
    graph: &ViewGraph,
    rotations: &RotationField,
    opts: &TranslationOptions,
) -> (PositionField, PointField) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sample = move || Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
    let anchor = graph.anchor_unit();
    let mut positions = PositionField::zeros(graph);
    for (u, c) in positions.unit_position.iter_mut() {
        let v = sample();
        if Some(*u) != anchor {
            *c = v;
        }
    }
    let (tracks, _) = track_rays(graph, rotations, opts.max_track_length);
    let points = tracks.iter().map(|(p, _)| (*p, sample())).collect();
    (positions, points)
}
