//! Interchange formats: the JSON view graph and the plain-text pose,
//! rig and point files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{
    CameraPose, ImageId, ImageNode, Intrinsics, IntrinsicsId, PointId, ReconstructionState,
    RelativePoseEdge, SceneError, SlotId, Track, TrackObservation, UnitId, ViewGraph,
};
use crate::Rotation;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    images: Vec<ImageRecord>,
    intrinsics: Vec<IntrinsicsRecord>,
    edges: Vec<EdgeRecord>,
    tracks: Vec<TrackRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    image_id: u32,
    unit_id: u32,
    slot_id: u32,
    intrinsics_id: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsRecord {
    intrinsics_id: u32,
    focal: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    i: u32,
    j: u32,
    q: [f64; 4],
    t: [f64; 3],
    inliers: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    point_id: u32,
    obs: Vec<ObsRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObsRecord {
    image_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    py: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    by: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bz: Option<f64>,
}

/// Parses a view graph document. Duplicate images, intrinsics, edges or
/// points are rejected.
pub fn parse_view_graph(text: &str) -> Result<ViewGraph, SceneError> {
    let file: GraphFile = serde_json::from_str(text)?;
    let mut g = ViewGraph::default();
    for r in file.intrinsics {
        let intr = Intrinsics {
            focal: r.focal,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
        };
        if g.intrinsics.insert(IntrinsicsId(r.intrinsics_id), intr).is_some() {
            return Err(SceneError::Duplicate(format!("intrinsics {}", r.intrinsics_id)));
        }
    }
    for r in file.images {
        let node = ImageNode {
            id: ImageId(r.image_id),
            unit: UnitId(r.unit_id),
            slot: SlotId(r.slot_id),
            intrinsics: IntrinsicsId(r.intrinsics_id),
        };
        if g.images.insert(node.id, node).is_some() {
            return Err(SceneError::Duplicate(format!("image {}", r.image_id)));
        }
    }
    let mut keys = BTreeSet::new();
    for r in file.edges {
        let e = RelativePoseEdge::from_quaternion(
            ImageId(r.i),
            ImageId(r.j),
            r.q,
            Vector3::from(r.t),
            r.inliers,
        );
        if !keys.insert(e.key()) {
            return Err(SceneError::Duplicate(format!("edge ({}, {})", r.i, r.j)));
        }
        g.edges.push(e);
    }
    let mut points = BTreeSet::new();
    for r in file.tracks {
        if !points.insert(r.point_id) {
            return Err(SceneError::Duplicate(format!("point {}", r.point_id)));
        }
        let mut observations = Vec::with_capacity(r.obs.len());
        for o in r.obs {
            let pixel = match (o.px, o.py) {
                (Some(x), Some(y)) => Some(Vector2::new(x, y)),
                (None, None) => None,
                _ => {
                    return Err(SceneError::Invalid(format!(
                        "track {} image {}: pixel needs both px and py",
                        r.point_id, o.image_id
                    )))
                }
            };
            let bearing = match (o.bx, o.by, o.bz) {
                (Some(x), Some(y), Some(z)) => Some(Vector3::new(x, y, z)),
                (None, None, None) => None,
                _ => {
                    return Err(SceneError::Invalid(format!(
                        "track {} image {}: bearing needs bx, by and bz",
                        r.point_id, o.image_id
                    )))
                }
            };
            if pixel.is_none() && bearing.is_none() {
                return Err(SceneError::Invalid(format!(
                    "track {} image {}: observation without pixel or bearing",
                    r.point_id, o.image_id
                )));
            }
            observations.push(TrackObservation {
                image: ImageId(o.image_id),
                pixel,
                bearing,
            });
        }
        g.tracks.push(Track {
            point: PointId(r.point_id),
            observations,
        });
    }
    Ok(g)
}

pub fn serialize_view_graph(g: &ViewGraph) -> String {
    let file = GraphFile {
        images: g
            .images
            .values()
            .map(|n| ImageRecord {
                image_id: n.id.0,
                unit_id: n.unit.0,
                slot_id: n.slot.0,
                intrinsics_id: n.intrinsics.0,
            })
            .collect(),
        intrinsics: g
            .intrinsics
            .iter()
            .map(|(id, i)| IntrinsicsRecord {
                intrinsics_id: id.0,
                focal: i.focal,
                cx: i.cx,
                cy: i.cy,
                width: i.width,
                height: i.height,
            })
            .collect(),
        edges: g
            .edges
            .iter()
            .map(|e| EdgeRecord {
                i: e.i.0,
                j: e.j.0,
                q: e.quaternion(),
                t: [e.translation.x, e.translation.y, e.translation.z],
                inliers: e.inliers,
            })
            .collect(),
        tracks: g
            .tracks
            .iter()
            .map(|t| TrackRecord {
                point_id: t.point.0,
                obs: t
                    .observations
                    .iter()
                    .map(|o| ObsRecord {
                        image_id: o.image.0,
                        px: o.pixel.map(|p| p.x),
                        py: o.pixel.map(|p| p.y),
                        bx: o.bearing.map(|b| b.x),
                        by: o.bearing.map(|b| b.y),
                        bz: o.bearing.map(|b| b.z),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("graph serializes");
    s.push('\n');
    s
}

pub fn read_view_graph(path: &Path) -> Result<ViewGraph, SceneError> {
    parse_view_graph(&std::fs::read_to_string(path)?)
}

fn pose_line(out: &mut String, id: u32, r: &Rotation, v: &Vector3<f64>) {
    let q = r.to_quaternion();
    writeln!(
        out,
        "{id} {} {} {} {} {} {} {}",
        q[0], q[1], q[2], q[3], v.x, v.y, v.z
    )
    .unwrap();
}

/// `image_id qw qx qy qz cx cy cz` per image.
pub fn format_image_poses(poses: &BTreeMap<ImageId, CameraPose>) -> String {
    let mut s = String::new();
    for (id, p) in poses {
        pose_line(&mut s, id.0, &p.rotation, &p.center);
    }
    s
}

/// `unit_id qw qx qy qz cx cy cz` per unit.
pub fn format_unit_poses(state: &ReconstructionState) -> String {
    let mut s = String::new();
    for (id, r) in &state.unit_rotation {
        if let Some(c) = state.unit_position.get(id) {
            pose_line(&mut s, id.0, r, c);
        }
    }
    s
}

/// `slot_id qw qx qy qz tx ty tz` per slot.
pub fn format_rig(state: &ReconstructionState) -> String {
    let mut s = String::new();
    for (id, r) in &state.rig.rotation {
        if let Some(t) = state.rig.translation.get(id) {
            pose_line(&mut s, id.0, r, t);
        }
    }
    s
}

/// `point_id X Y Z` per point.
pub fn format_points(points: &BTreeMap<PointId, Vector3<f64>>) -> String {
    let mut s = String::new();
    for (id, p) in points {
        writeln!(s, "{} {} {} {}", id.0, p.x, p.y, p.z).unwrap();
    }
    s
}

fn parse_rows(text: &str, width: usize) -> Result<Vec<(u32, Vec<f64>)>, SceneError> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let id: u32 = it
            .next()
            .unwrap()
            .parse()
            .map_err(|e| SceneError::Parse { line: n + 1, message: format!("id: {e}") })?;
        let vals: Vec<f64> = it
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SceneError::Parse { line: n + 1, message: e.to_string() })?;
        if vals.len() != width {
            return Err(SceneError::Parse {
                line: n + 1,
                message: format!("expected {} values, found {}", width, vals.len()),
            });
        }
        rows.push((id, vals));
    }
    Ok(rows)
}

type PoseRows = BTreeMap<u32, (Rotation, Vector3<f64>)>;

/// Parses any of the pose-like files (images, units, rig).
pub fn parse_pose_rows(text: &str) -> Result<PoseRows, SceneError> {
    let mut out = BTreeMap::new();
    for (id, v) in parse_rows(text, 7)? {
        let r = Rotation::from_quaternion([v[0], v[1], v[2], v[3]]);
        if out.insert(id, (r, Vector3::new(v[4], v[5], v[6]))).is_some() {
            return Err(SceneError::Duplicate(format!("pose id {id}")));
        }
    }
    Ok(out)
}

pub fn parse_image_poses(text: &str) -> Result<BTreeMap<ImageId, CameraPose>, SceneError> {
    Ok(parse_pose_rows(text)?
        .into_iter()
        .map(|(id, (rotation, center))| (ImageId(id), CameraPose { rotation, center }))
        .collect())
}

pub fn parse_points(text: &str) -> Result<BTreeMap<PointId, Vector3<f64>>, SceneError> {
    Ok(parse_rows(text, 3)?
        .into_iter()
        .map(|(id, v)| (PointId(id), Vector3::new(v[0], v[1], v[2])))
        .collect())
}

pub const IMAGE_POSES_FILE: &str = "poses.txt";
pub const UNIT_POSES_FILE: &str = "units.txt";
pub const RIG_FILE: &str = "rig.txt";
pub const POINTS_FILE: &str = "points.txt";

/// Writes `poses.txt`, `units.txt`, `rig.txt` and `points.txt` into `dir`.
pub fn write_state(dir: &Path, state: &ReconstructionState) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(IMAGE_POSES_FILE), format_image_poses(&state.camera_poses()))?;
    std::fs::write(dir.join(UNIT_POSES_FILE), format_unit_poses(state))?;
    std::fs::write(dir.join(RIG_FILE), format_rig(state))?;
    std::fs::write(dir.join(POINTS_FILE), format_points(&state.points))?;
    Ok(())
}

/// Reads a state written by [`write_state`]; image membership and intrinsics
/// come from the view graph.
pub fn read_state(dir: &Path, graph: &ViewGraph) -> Result<ReconstructionState, SceneError> {
    let units = parse_pose_rows(&std::fs::read_to_string(dir.join(UNIT_POSES_FILE))?)?;
    let rig = parse_pose_rows(&std::fs::read_to_string(dir.join(RIG_FILE))?)?;
    let points_path = dir.join(POINTS_FILE);
    let points = if points_path.exists() {
        parse_points(&std::fs::read_to_string(points_path)?)?
    } else {
        BTreeMap::new()
    };
    let mut s = ReconstructionState {
        images: graph.images.clone(),
        intrinsics: graph.intrinsics.clone(),
        points,
        ..Default::default()
    };
    for (id, (r, c)) in units {
        s.unit_rotation.insert(UnitId(id), r);
        s.unit_position.insert(UnitId(id), c);
    }
    for (id, (r, t)) in rig {
        s.rig.rotation.insert(SlotId(id), r);
        s.rig.translation.insert(SlotId(id), t);
    }
    Ok(s)
}
