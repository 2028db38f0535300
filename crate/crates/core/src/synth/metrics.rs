use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{CameraPose, ImageId, RigCalibration, SlotId, UnitId};
use crate::so3::{geodesic_distance, geodesic_median, MEDIAN_DEFAULT_MAX_ITER, MEDIAN_DEFAULT_TOL};
use crate::Rotation;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("need at least 3 common cameras, found {0}")]
    TooFewCameras(usize),
    #[error("estimated and true image sets differ ({missing} missing, {extra} extra)")]
    ImageSetMismatch { missing: usize, extra: usize },
    #[error("degenerate alignment: {0}")]
    Degenerate(&'static str),
}

/// `x_true = scale * rotation * x_est + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.act(x) * self.scale + self.translation
    }

    /// Moves a camera along with the world.
    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: pose.rotation.compose(&self.rotation.transpose()),
            center: self.apply(&pose.center),
        }
    }
}

/// Lower middle order statistic; `NaN` for an empty slice.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity, MetricError> {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s <= 0.0 || !var_s.is_finite() {
        return Err(MetricError::Degenerate("estimated cameras coincide"));
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    let scale = (svd.singular_values.component_mul(&sign.diagonal())).sum() / var_s;
    let rotation = Rotation::project(&r).map_err(|_| MetricError::Degenerate("rotation"))?;
    Ok(Similarity {
        scale,
        rotation,
        translation: mu_d - rotation.act(&mu_s) * scale,
    })
}

fn spread(points: &[Vector3<f64>]) -> (f64, Vector3<f64>) {
    let n = points.len() as f64;
    let mu = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let a = p - mu;
        cov += a * a.transpose();
    }
    let eig = (cov / n).symmetric_eigen();
    let mut l = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    l.sort_by(f64::total_cmp);
    (l[2], Vector3::new(l[0], l[1], l[2]))
}

/// Least-squares similarity taking estimated camera centers onto the true ones.
///
/// Nearly collinear true centers are augmented with points one hundredth of
/// the trajectory length in front of and to the right of each camera, which
/// pins the rotation about the trajectory axis.
pub fn align_similarity(
    estimated: &BTreeMap<ImageId, CameraPose>,
    truth: &BTreeMap<ImageId, CameraPose>,
) -> Result<Similarity, MetricError> {
    let common: Vec<ImageId> = estimated.keys().filter(|k| truth.contains_key(k)).copied().collect();
    if common.len() < 3 {
        return Err(MetricError::TooFewCameras(common.len()));
    }
    let mut src: Vec<Vector3<f64>> = common.iter().map(|k| estimated[k].center).collect();
    let mut dst: Vec<Vector3<f64>> = common.iter().map(|k| truth[k].center).collect();
    let (top, eig) = spread(&dst);
    if top <= 0.0 {
        return Err(MetricError::Degenerate("true cameras coincide"));
    }
    if eig[1] < 1e-4 * eig[2] {
        let (top_est, _) = spread(&src);
        if top_est <= 0.0 {
            return Err(MetricError::Degenerate("estimated cameras coincide"));
        }
        let s0 = (top / top_est).sqrt();
        let length = dst
            .iter()
            .flat_map(|a| dst.iter().map(move |b| (a - b).norm()))
            .fold(0.0, f64::max);
        let offset = length / 100.0;
        for axis in [Vector3::z(), Vector3::x()] {
            for k in &common {
                let (e, t) = (&estimated[k], &truth[k]);
                src.push(e.center + e.rotation.transpose().act(&axis) * (offset / s0));
                dst.push(t.center + t.rotation.transpose().act(&axis) * offset);
            }
        }
    }
    umeyama(&src, &dst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageError {
    pub image: ImageId,
    pub rotation_deg: f64,
    pub position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub num_images: usize,
    pub median_rotation_deg: f64,
    pub mean_rotation_deg: f64,
    pub max_rotation_deg: f64,
    pub median_position: f64,
    pub mean_position: f64,
    pub max_position: f64,
    pub alignment_scale: f64,
    pub per_image: Vec<ImageError>,
}

impl ErrorReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Summary and per-image rows as an aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>14} {:>14} {:>14}", "metric", "median", "mean", "max").unwrap();
        writeln!(
            s,
            "{:<10} {:>14.6e} {:>14.6e} {:>14.6e}",
            "rot_deg", self.median_rotation_deg, self.mean_rotation_deg, self.max_rotation_deg
        )
        .unwrap();
        writeln!(
            s,
            "{:<10} {:>14.6e} {:>14.6e} {:>14.6e}",
            "pos", self.median_position, self.mean_position, self.max_position
        )
        .unwrap();
        writeln!(s).unwrap();
        writeln!(s, "{:<10} {:>14} {:>14}", "image", "rot_deg", "pos").unwrap();
        for e in &self.per_image {
            writeln!(s, "{:<10} {:>14.6e} {:>14.6e}", e.image.0, e.rotation_deg, e.position).unwrap();
        }
        s
    }
}

/// Per-image rotation and position errors after similarity alignment.
pub fn pose_errors(
    estimated: &BTreeMap<ImageId, CameraPose>,
    truth: &BTreeMap<ImageId, CameraPose>,
) -> Result<ErrorReport, MetricError> {
    let missing = truth.keys().filter(|k| !estimated.contains_key(k)).count();
    let extra = estimated.keys().filter(|k| !truth.contains_key(k)).count();
    if missing + extra > 0 {
        return Err(MetricError::ImageSetMismatch { missing, extra });
    }
    let sim = align_similarity(estimated, truth)?;
    let per_image: Vec<ImageError> = estimated
        .iter()
        .map(|(&image, e)| {
            let t = &truth[&image];
            let aligned = sim.apply_pose(e);
            ImageError {
                image,
                rotation_deg: geodesic_distance(&aligned.rotation, &t.rotation).to_degrees(),
                position: (aligned.center - t.center).norm(),
            }
        })
        .collect();
    let rot: Vec<f64> = per_image.iter().map(|e| e.rotation_deg).collect();
    let pos: Vec<f64> = per_image.iter().map(|e| e.position).collect();
    let n = per_image.len() as f64;
    Ok(ErrorReport {
        num_images: per_image.len(),
        median_rotation_deg: lower_median(&rot),
        mean_rotation_deg: rot.iter().sum::<f64>() / n,
        max_rotation_deg: rot.iter().copied().fold(0.0, f64::max),
        median_position: lower_median(&pos),
        mean_position: pos.iter().sum::<f64>() / n,
        max_position: pos.iter().copied().fold(0.0, f64::max),
        alignment_scale: sim.scale,
        per_image,
    })
}

/// Unit rotation errors in degrees, after removing the global rotation
/// (geodesic median of `R_est^T R_true`).
pub fn unit_rotation_errors(
    estimated: &BTreeMap<UnitId, Rotation>,
    truth: &BTreeMap<UnitId, Rotation>,
) -> BTreeMap<UnitId, f64> {
    let pairs: Vec<(UnitId, Rotation, Rotation)> = estimated
        .iter()
        .filter_map(|(u, e)| truth.get(u).map(|t| (*u, *e, *t)))
        .collect();
    let offsets: Vec<Rotation> = pairs.iter().map(|(_, e, t)| e.transpose() * *t).collect();
    let Ok(q) = geodesic_median(&offsets, MEDIAN_DEFAULT_TOL, MEDIAN_DEFAULT_MAX_ITER) else {
        return BTreeMap::new();
    };
    pairs
        .iter()
        .map(|(u, e, t)| (*u, geodesic_distance(&(*e * q.rotation), t).to_degrees()))
        .collect()
}

/// Internal rotation errors in degrees. Both rigs share the reference slot
/// gauge, so no alignment is needed.
pub fn rig_rotation_errors(estimated: &RigCalibration, truth: &RigCalibration) -> BTreeMap<SlotId, f64> {
    estimated
        .rotation
        .iter()
        .filter_map(|(s, e)| truth.rotation.get(s).map(|t| (*s, geodesic_distance(e, t).to_degrees())))
        .collect()
}

/// Median relative error of consecutive unit displacement lengths after a
/// single least-squares scale: `median |s |dc_est| / |dc_true| - 1|`.
pub fn trajectory_scale_error(
    estimated: &BTreeMap<UnitId, Vector3<f64>>,
    truth: &BTreeMap<UnitId, Vector3<f64>>,
) -> f64 {
    let units: Vec<UnitId> = truth.keys().filter(|u| estimated.contains_key(u)).copied().collect();
    let steps: Vec<(f64, f64)> = units
        .windows(2)
        .map(|w| {
            (
                (estimated[&w[1]] - estimated[&w[0]]).norm(),
                (truth[&w[1]] - truth[&w[0]]).norm(),
            )
        })
        .filter(|(_, t)| *t > 0.0)
        .collect();
    let num: f64 = steps.iter().map(|(e, t)| e * t).sum();
    let den: f64 = steps.iter().map(|(e, _)| e * e).sum();
    if steps.is_empty() || den <= 0.0 {
        return f64::INFINITY;
    }
    let s = num / den;
    let rel: Vec<f64> = steps.iter().map(|(e, t)| (s * e / t - 1.0).abs()).collect();
    lower_median(&rel)
}
