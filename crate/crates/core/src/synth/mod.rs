//! Ground-truth rig scenes, measurement synthesis and error metrics.

mod metrics;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    ImageId, ImageNode, Intrinsics, IntrinsicsId, PointId, ReconstructionState, RelativePoseEdge,
    RigCalibration, SlotId, Track, TrackObservation, UnitId, ViewGraph,
};
use crate::Rotation;

pub use metrics::{
    align_similarity, lower_median, pose_errors, rig_rotation_errors, trajectory_scale_error,
    unit_rotation_errors, ErrorReport, ImageError, MetricError, Similarity,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("scene has fewer than two co-visible units")]
    NotCovisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Loop,
    Line,
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    /// Path length in meters.
    pub extent: f64,
    /// Random pitch/roll wobble of each unit, degrees.
    pub jitter_deg: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Loop,
            extent: 100.0,
            jitter_deg: 2.0,
        }
    }
}

/// One camera of the rig, posed in the rig frame (x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlotConfig {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    /// Camera center in the rig frame, meters.
    pub position: [f64; 3],
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self {
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            position: [0.0; 3],
        }
    }
}

impl SlotConfig {
    pub fn new(yaw_deg: f64, position: [f64; 3]) -> Self {
        Self {
            yaw_deg,
            position,
            ..Self::default()
        }
    }

    /// Maps rig-frame directions into this camera's frame.
    fn rotation(&self) -> Rotation {
        let yaw = Rotation::exp(&Vector3::new(0.0, -self.yaw_deg.to_radians(), 0.0));
        let pitch = Rotation::exp(&Vector3::new(-self.pitch_deg.to_radians(), 0.0, 0.0));
        let roll = Rotation::exp(&Vector3::new(0.0, 0.0, -self.roll_deg.to_radians()));
        roll * pitch * yaw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointRegion {
    /// Points beside the trajectory: lateral distance and height relative to the path.
    Corridor {
        min_lateral: f64,
        max_lateral: f64,
        min_height: f64,
        max_height: f64,
    },
    /// Axis-aligned box in the world frame of the generator (z up).
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Default for PointRegion {
    fn default() -> Self {
        PointRegion::Corridor {
            min_lateral: 4.0,
            max_lateral: 15.0,
            min_height: -1.5,
            max_height: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub focal: f64,
    pub width: f64,
    pub height: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal: 500.0,
            width: 1000.0,
            height: 1000.0,
            min_depth: 0.5,
            max_depth: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_units: usize,
    pub slots: Vec<SlotConfig>,
    pub trajectory: Trajectory,
    pub num_points: usize,
    pub point_region: PointRegion,
    pub camera: CameraConfig,
    pub pixel_noise_sigma: f64,
    /// Per-edge geodesic noise of relative rotations and translation directions, degrees.
    pub rotation_noise_sigma: f64,
    pub edge_outlier_fraction: f64,
    pub bearing_outlier_fraction: f64,
    pub intra_unit_edges: bool,
    pub loop_closures: bool,
    /// Units at most this far apart in sequence are matched.
    pub covisibility_window: usize,
    /// Shared points needed for an image pair to become an edge.
    pub min_shared_points: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_units: 50,
            slots: vec![
                SlotConfig::new(0.0, [0.0, 0.0, 0.0]),
                SlotConfig::new(60.0, [0.6, 0.0, 0.1]),
                SlotConfig::new(-60.0, [-0.6, 0.0, 0.1]),
            ],
            trajectory: Trajectory::default(),
            num_points: 2000,
            point_region: PointRegion::default(),
            camera: CameraConfig::default(),
            pixel_noise_sigma: 0.0,
            rotation_noise_sigma: 0.0,
            edge_outlier_fraction: 0.0,
            bearing_outlier_fraction: 0.0,
            intra_unit_edges: false,
            loop_closures: false,
            covisibility_window: 2,
            min_shared_points: 15,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.num_units < 2 {
            return bad("num_units must be at least 2");
        }
        if self.slots.is_empty() {
            return bad("at least one slot is required");
        }
        if !(0.0..1.0).contains(&self.edge_outlier_fraction) || !(0.0..1.0).contains(&self.bearing_outlier_fraction) {
            return bad("outlier fractions must lie in [0, 1)");
        }
        if self.pixel_noise_sigma < 0.0 || self.rotation_noise_sigma < 0.0 {
            return bad("noise sigmas must be non-negative");
        }
        if !(self.trajectory.extent > 0.0) || !(self.camera.focal > 0.0) {
            return bad("extent and focal must be positive");
        }
        Ok(())
    }
}

/// Ground truth and measurements of one synthetic scene.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub truth: ReconstructionState,
    pub graph: ViewGraph,
    /// Edges whose measurement was replaced by a random one, as `(i, j)`.
    pub outlier_edges: BTreeSet<(ImageId, ImageId)>,
    pub outlier_observations: usize,
}

pub fn image_id(unit: usize, slot: usize, num_slots: usize) -> ImageId {
    ImageId((unit * num_slots + slot) as u32)
}

/// World-to-unit rotation for a heading in a z-up world, with small pitch/roll.
fn unit_rotation(forward: &Vector3<f64>, pitch: f64, roll: f64) -> Rotation {
    let down = -Vector3::z();
    let f = forward.normalize();
    let right = down.cross(&f).normalize();
    let down = f.cross(&right);
    let base = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
    let wobble = Rotation::exp(&Vector3::new(pitch, 0.0, roll));
    wobble * Rotation::from_matrix_unchecked(base)
}

struct Path {
    positions: Vec<Vector3<f64>>,
    forwards: Vec<Vector3<f64>>,
}

fn make_path(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Path {
    let n = cfg.num_units;
    let extent = cfg.trajectory.extent;
    let mut positions = Vec::with_capacity(n);
    let mut forwards = Vec::with_capacity(n);
    match cfg.trajectory.kind {
        TrajectoryKind::Loop => {
            let r = extent / std::f64::consts::TAU;
            for u in 0..n {
                let a = std::f64::consts::TAU * u as f64 / n as f64;
                positions.push(Vector3::new(r * a.cos(), r * a.sin(), 0.0));
                forwards.push(Vector3::new(-a.sin(), a.cos(), 0.0));
            }
        }
        TrajectoryKind::Line => {
            let mean = extent / (n - 1) as f64;
            let mut x = 0.0;
            for u in 0..n {
                if u > 0 {
                    x += mean * rng.random_range(0.5..1.5);
                }
                positions.push(Vector3::new(x, 0.0, 0.0));
                forwards.push(Vector3::x());
            }
        }
        TrajectoryKind::RandomWalk => {
            let step = extent / (n - 1) as f64;
            let mut heading: f64 = 0.0;
            let mut p = Vector3::zeros();
            for u in 0..n {
                if u > 0 {
                    heading += rng.random_range(-15f64..15.0).to_radians();
                    p += Vector3::new(heading.cos(), heading.sin(), 0.0) * step;
                }
                positions.push(p);
                forwards.push(Vector3::new(heading.cos(), heading.sin(), 0.0));
            }
        }
    }
    Path { positions, forwards }
}

fn sample_point(cfg: &SceneConfig, path: &Path, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    match cfg.point_region {
        PointRegion::Corridor {
            min_lateral,
            max_lateral,
            min_height,
            max_height,
        } => {
            let n = path.positions.len();
            let t = rng.random_range(0.0..(n - 1) as f64);
            let k = (t.floor() as usize).min(n - 2);
            let f = t - k as f64;
            let base = path.positions[k] * (1.0 - f) + path.positions[k + 1] * f;
            let fwd = (path.forwards[k] * (1.0 - f) + path.forwards[k + 1] * f).normalize();
            let right = fwd.cross(&Vector3::z()).normalize();
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = side * rng.random_range(min_lateral..max_lateral);
            let along = rng.random_range(-1.0..1.0);
            base + right * lateral + fwd * along + Vector3::z() * rng.random_range(min_height..max_height)
        }
        PointRegion::Box { min, max } => Vector3::new(
            rng.random_range(min[0]..max[0]),
            rng.random_range(min[1]..max[1]),
            rng.random_range(min[2]..max[2]),
        ),
    }
}

/// Random tangent vector with per-component standard deviation `sigma / sqrt(3)`.
fn tangent_noise(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma / 3f64.sqrt()).expect("finite sigma");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn random_unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Builds a rig scene and its view graph. Deterministic in `cfg.seed`.
///
/// The truth is expressed in the estimation gauge: unit 0 sits at the origin
/// with identity rotation and slot 0 defines the rig frame.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GeneratedScene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ns = cfg.slots.len();
    let nu = cfg.num_units;
    let path = make_path(cfg, &mut rng);

    // rig frame := slot 0 camera frame
    let r0 = cfg.slots[0].rotation();
    let o0 = Vector3::from(cfg.slots[0].position);
    let mut rig = RigCalibration::default();
    for (s, sc) in cfg.slots.iter().enumerate() {
        let slot = SlotId(s as u32);
        if s == 0 {
            rig.rotation.insert(slot, Rotation::identity());
            rig.translation.insert(slot, Vector3::zeros());
        } else {
            let rr = sc.rotation() * r0.transpose();
            let center = r0.act(&(Vector3::from(sc.position) - o0));
            rig.rotation.insert(slot, rr);
            rig.translation.insert(slot, -rr.act(&center));
        }
    }

    let jitter = cfg.trajectory.jitter_deg.to_radians();
    let mut world_rot = Vec::with_capacity(nu);
    let mut world_pos = Vec::with_capacity(nu);
    for u in 0..nu {
        let (pitch, roll) = if jitter > 0.0 {
            (rng.random_range(-jitter..jitter), rng.random_range(-jitter..jitter))
        } else {
            (0.0, 0.0)
        };
        let frame = unit_rotation(&path.forwards[u], pitch, roll);
        world_rot.push(r0 * frame);
        world_pos.push(path.positions[u] + frame.transpose().act(&o0));
    }

    // change of world frame: x' = G (x - c0), with G = R^g_0
    let g = world_rot[0];
    let c0 = world_pos[0];
    let to_gauge = |x: &Vector3<f64>| g.act(&(x - c0));

    let mut truth = ReconstructionState {
        rig,
        ..ReconstructionState::default()
    };
    for s in 0..ns {
        truth.intrinsics.insert(
            IntrinsicsId(s as u32),
            Intrinsics {
                focal: cfg.camera.focal,
                cx: cfg.camera.width / 2.0,
                cy: cfg.camera.height / 2.0,
                width: cfg.camera.width,
                height: cfg.camera.height,
            },
        );
    }
    for u in 0..nu {
        let unit = UnitId(u as u32);
        let rot = if u == 0 {
            Rotation::identity()
        } else {
            world_rot[u].compose(&g.transpose())
        };
        let pos = if u == 0 { Vector3::zeros() } else { to_gauge(&world_pos[u]) };
        truth.unit_rotation.insert(unit, rot);
        truth.unit_position.insert(unit, pos);
        for s in 0..ns {
            let id = image_id(u, s, ns);
            truth.images.insert(
                id,
                ImageNode {
                    id,
                    unit,
                    slot: SlotId(s as u32),
                    intrinsics: IntrinsicsId(s as u32),
                },
            );
        }
    }
    let poses = truth.camera_poses();
    let intr = truth.intrinsics[&IntrinsicsId(0)];

    // points and visibility
    let mut points: Vec<(Vector3<f64>, Vec<(ImageId, Vector2<f64>)>)> = Vec::with_capacity(cfg.num_points);
    let mut attempts = 0;
    while points.len() < cfg.num_points && attempts < cfg.num_points * 50 {
        attempts += 1;
        let p = to_gauge(&sample_point(cfg, &path, &mut rng));
        let mut obs = Vec::new();
        for (&id, pose) in &poses {
            let x = pose.rotation.act(&(p - pose.center));
            if x.z < cfg.camera.min_depth || x.norm() > cfg.camera.max_depth {
                continue;
            }
            if let Some(px) = intr.project(&x) {
                if intr.contains(&px) {
                    obs.push((id, px));
                }
            }
        }
        let units: BTreeSet<UnitId> = obs.iter().map(|(id, _)| truth.images[id].unit).collect();
        if obs.len() >= 2 && units.len() >= 2 {
            points.push((p, obs));
        }
    }

    // co-visibility counts per image pair
    let mut shared: BTreeMap<(ImageId, ImageId), u32> = BTreeMap::new();
    for (_, obs) in &points {
        for (a, (ia, _)) in obs.iter().enumerate() {
            for (ib, _) in &obs[a + 1..] {
                *shared.entry((*ia, *ib)).or_insert(0) += 1;
            }
        }
    }
    let mut pairs: BTreeSet<(ImageId, ImageId)> = BTreeSet::new();
    let loop_radius = cfg.trajectory.extent / nu as f64 * 1.5;
    for u in 0..nu {
        for v in u..nu {
            let near = v - u <= cfg.covisibility_window;
            let closure = cfg.loop_closures
                && v - u > cfg.covisibility_window
                && (path.positions[u] - path.positions[v]).norm() <= loop_radius;
            if !near && !closure {
                continue;
            }
            for a in 0..ns {
                for b in 0..ns {
                    if u == v && (a >= b || !cfg.intra_unit_edges) {
                        continue;
                    }
                    let (i, j) = (image_id(u, a, ns), image_id(v, b, ns));
                    let count = shared.get(&(i.min(j), i.max(j))).copied().unwrap_or(0);
                    let sequential = v == u + 1 && a == b;
                    if sequential || count as usize >= cfg.min_shared_points {
                        pairs.insert((i, j));
                    }
                }
            }
        }
    }
    let covisible_units: BTreeSet<UnitId> = pairs
        .iter()
        .filter(|(i, j)| truth.images[i].unit != truth.images[j].unit)
        .flat_map(|(i, j)| [truth.images[i].unit, truth.images[j].unit])
        .collect();
    if covisible_units.len() < 2 || points.is_empty() {
        return Err(SynthError::NotCovisible);
    }

    let sigma = cfg.rotation_noise_sigma.to_radians();
    let mut edges = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let (pi, pj) = (poses[&i], poses[&j]);
        let rij = pj.rotation.compose(&pi.rotation.transpose());
        let tij = pj.rotation.act(&(pi.center - pj.center)).normalize();
        let rij = Rotation::exp(&tangent_noise(&mut rng, sigma)).compose(&rij);
        let tij = Rotation::exp(&tangent_noise(&mut rng, sigma)).act(&tij).normalize();
        let count = shared.get(&(i.min(j), i.max(j))).copied().unwrap_or(0);
        edges.push(RelativePoseEdge::new(i, j, rij, tij, count.max(1)));
    }
    let num_outliers = (cfg.edge_outlier_fraction * edges.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.shuffle(&mut rng);
    let mut outlier_edges = BTreeSet::new();
    for &k in &order[..num_outliers] {
        let e = &edges[k];
        let r = Rotation::uniform(&mut rng);
        let t = random_unit_vector(&mut rng);
        outlier_edges.insert((e.i, e.j));
        edges[k] = RelativePoseEdge::new(e.i, e.j, r, t, e.inliers);
    }

    let pixel_noise = (cfg.pixel_noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.pixel_noise_sigma).unwrap());
    let mut tracks = Vec::with_capacity(points.len());
    for (k, (p, obs)) in points.iter().enumerate() {
        let id = PointId(k as u32);
        truth.points.insert(id, *p);
        let observations = obs
            .iter()
            .map(|(img, px)| {
                let mut px = *px;
                if let Some(n) = &pixel_noise {
                    px += Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
                }
                TrackObservation::pixel(*img, px)
            })
            .collect();
        tracks.push(Track { point: id, observations });
    }
    let slots: Vec<(usize, usize)> = tracks
        .iter()
        .enumerate()
        .flat_map(|(t, tr)| (0..tr.observations.len()).map(move |o| (t, o)))
        .collect();
    let num_bad = (cfg.bearing_outlier_fraction * slots.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.shuffle(&mut rng);
    for &k in &order[..num_bad] {
        let (t, o) = slots[k];
        // uniform direction on the forward hemisphere, rejected until it lands in the image
        let px = loop {
            let mut b = random_unit_vector(&mut rng);
            if b.z < 0.0 {
                b = -b;
            }
            if let Some(px) = intr.project(&b).filter(|px| intr.contains(px)) {
                break px;
            }
        };
        let img = tracks[t].observations[o].image;
        tracks[t].observations[o] = TrackObservation::pixel(img, px);
    }

    let graph = ViewGraph {
        images: truth.images.clone(),
        intrinsics: truth.intrinsics.clone(),
        edges,
        tracks,
    };
    Ok(GeneratedScene {
        truth,
        graph,
        outlier_edges,
        outlier_observations: num_bad,
    })
}

pub const GRAPH_FILE: &str = "graph.json";
pub const TRUTH_DIR: &str = "truth";

/// Writes `graph.json` and the ground truth under `truth/`.
pub fn write_scene(dir: &std::path::Path, scene: &GeneratedScene) -> Result<(), crate::scene::SceneError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(GRAPH_FILE), crate::scene::io::serialize_view_graph(&scene.graph))?;
    crate::scene::io::write_state(&dir.join(TRUTH_DIR), &scene.truth)
}
