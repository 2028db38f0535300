use nalgebra::Vector3;
use rayon::prelude::*;

use crate::rotation::RotationField;
use crate::scene::ViewGraph;
use crate::so3::hat;
use crate::solver::{admm_l1, AdmmL1Problem, AdmmOptions};

use super::{track_rays, PointField, PositionField, StageReport, TranslationError, TranslationOptions};

/// Rays closer to parallel than this (sine of the angle) give no seed.
const PARALLEL_SINE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TriangulationOutcome {
    Point(Vector3<f64>),
    /// Every pair of rays is parallel.
    Collinear,
    /// Behind more than half of its cameras.
    NegativeDepth,
    /// Largest angle between two rays below the threshold.
    SmallAngle,
}

fn midpoint(c1: &Vector3<f64>, b1: &Vector3<f64>, c2: &Vector3<f64>, b2: &Vector3<f64>) -> Option<Vector3<f64>> {
    let w = c1 - c2;
    let (a, b, c) = (b1.dot(b1), b1.dot(b2), b2.dot(b2));
    let (d, e) = (b1.dot(&w), b2.dot(&w));
    let den = a * c - b * b;
    if den <= PARALLEL_SINE * PARALLEL_SINE * a * c {
        return None;
    }
    let s = (b * e - c * d) / den;
    let t = (a * e - b * d) / den;
    Some(((c1 + b1 * s) + (c2 + b2 * t)) * 0.5)
}

/// `min_p sum |b_k x (p - c_k)|_1` over rays `(c_k, b_k)`, seeded at the
/// midpoint of the first non-parallel pair, then filtered by depth and
/// triangulation angle.
pub fn triangulate_point(
    rays: &[(Vector3<f64>, Vector3<f64>)],
    min_angle_deg: f64,
    opts: &AdmmOptions,
) -> TriangulationOutcome {
    let seed = rays
        .iter()
        .enumerate()
        .flat_map(|(k, a)| rays[k + 1..].iter().map(move |b| (a, b)))
        .find_map(|((c1, b1), (c2, b2))| midpoint(c1, b1, c2, b2));
    let Some(seed) = seed else {
        return TriangulationOutcome::Collinear;
    };
    let mut p = AdmmL1Problem::new();
    for _ in 0..3 {
        p.add_variable();
    }
    for (c, b) in rays {
        let s = hat(b);
        let d = s * c;
        for a in 0..3 {
            if s.row(a).iter().any(|v| *v != 0.0) {
                p.add_row(&[(0, s[(a, 0)]), (1, s[(a, 1)]), (2, s[(a, 2)])], d[a]);
            }
        }
    }
    p.set_initial(seed.as_slice().to_vec());
    let point = match admm_l1(&p, opts) {
        Ok(r) if r.solution.iter().all(|v| v.is_finite()) => Vector3::new(r.solution[0], r.solution[1], r.solution[2]),
        _ => seed,
    };

    let behind = rays.iter().filter(|(c, b)| (point - c).dot(b) <= 0.0).count();
    if 2 * behind > rays.len() {
        return TriangulationOutcome::NegativeDepth;
    }
    let dirs: Vec<Vector3<f64>> = rays.iter().filter_map(|(c, _)| (point - c).try_normalize(0.0)).collect();
    let min_cos = min_angle_deg.to_radians().cos();
    let wide = dirs
        .iter()
        .enumerate()
        .any(|(k, a)| dirs[k + 1..].iter().any(|b| a.dot(b) < min_cos));
    if !wide {
        return TriangulationOutcome::SmallAngle;
    }
    TriangulationOutcome::Point(point)
}

/// Triangulates every eligible track with the cameras held fixed.
pub fn triangulate_l1(
    graph: &ViewGraph,
    rotations: &RotationField,
    positions: &PositionField,
    opts: &TranslationOptions,
) -> Result<(PointField, StageReport), TranslationError> {
    let (tracks, skipped) = track_rays(graph, rotations, opts.max_track_length);
    let mut inputs = Vec::with_capacity(tracks.len());
    for (point, rays) in &tracks {
        let mut v = Vec::with_capacity(rays.len());
        for r in rays {
            let c = positions
                .camera_center(graph, rotations, r.image)
                .ok_or_else(|| TranslationError::MissingPosition(format!("image {}", r.image)))?;
            v.push((c, r.direction));
        }
        inputs.push((*point, v));
    }
    let outcomes: Vec<_> = inputs
        .par_iter()
        .map(|(point, rays)| (*point, triangulate_point(rays, opts.min_triangulation_angle_deg, &opts.admm)))
        .collect();

    let mut report = StageReport {
        points_in: tracks.len(),
        dropped_tracks: skipped,
        converged: true,
        termination: "per_point".to_string(),
        residuals: inputs.iter().map(|(_, r)| r.len()).sum(),
        ..StageReport::new("triangulate_l1")
    };
    let mut points = PointField::new();
    for (id, outcome) in outcomes {
        match outcome {
            TriangulationOutcome::Point(p) => {
                points.insert(id, p);
            }
            TriangulationOutcome::Collinear => report.dropped_collinear += 1,
            TriangulationOutcome::NegativeDepth => report.dropped_depth += 1,
            TriangulationOutcome::SmallAngle => report.dropped_angle += 1,
        }
    }
    report.points_out = points.len();
    Ok((points, report))
}
