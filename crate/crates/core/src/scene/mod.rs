//! View graphs, rigid units, feature tracks and reconstructions.

pub(crate) mod graph;
pub mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Rotation;

pub use graph::{
    largest_connected_component, maximum_spanning_tree, maximum_spanning_tree_images,
    maximum_spanning_tree_units, unit_quotient_graph, UnitEdge, UnitGraph,
};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// One image of the collection.
    ImageId
);
id_type!(
    /// A capture instant of the rig: all images sharing it form one rigid unit.
    UnitId
);
id_type!(
    /// A physical camera of the rig.
    SlotId
);
id_type!(IntrinsicsId);
id_type!(PointId);

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("empty view graph")]
    Empty,
    #[error("graph is disconnected: {} components (first nodes: {})", .components.len(), first_nodes(.components))]
    Disconnected { components: Vec<Vec<u32>> },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("duplicate {0}")]
    Duplicate(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn first_nodes(components: &[Vec<u32>]) -> String {
    components
        .iter()
        .map(|c| c.first().map(|x| x.to_string()).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Intrinsics {
    /// Unit ray through a pixel, in the camera frame.
    pub fn bearing(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.focal,
            (pixel.y - self.cy) / self.focal,
            1.0,
        )
        .normalize()
    }

    /// Pixel of a camera-frame point; `None` when the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 1e-9 {
            return None;
        }
        Some(Vector2::new(
            self.focal * p.x / p.z + self.cx,
            self.focal * p.y / p.z + self.cy,
        ))
    }

    /// Ideal pixel of a camera-frame ray (ray must point forward).
    pub fn pixel_of_bearing(&self, b: &Vector3<f64>) -> Option<Vector2<f64>> {
        self.project(b)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width && px.y <= self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageNode {
    pub id: ImageId,
    pub unit: UnitId,
    pub slot: SlotId,
    pub intrinsics: IntrinsicsId,
}

/// Two-view relative pose: `R_ij = R_j R_i^T` and `R_j^T t_ij ∝ c_i - c_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseEdge {
    pub i: ImageId,
    pub j: ImageId,
    quaternion: [f64; 4],
    rotation: Rotation,
    pub translation: Vector3<f64>,
    pub inliers: u32,
}

impl RelativePoseEdge {
    pub fn new(
        i: ImageId,
        j: ImageId,
        rotation: Rotation,
        translation: Vector3<f64>,
        inliers: u32,
    ) -> Self {
        Self {
            i,
            j,
            quaternion: rotation.to_quaternion(),
            rotation,
            translation,
            inliers,
        }
    }

    /// Builds an edge from a `[w, x, y, z]` quaternion, keeping its exact
    /// coefficients for serialization (sign flipped to `w >= 0`).
    pub fn from_quaternion(
        i: ImageId,
        j: ImageId,
        q: [f64; 4],
        translation: Vector3<f64>,
        inliers: u32,
    ) -> Self {
        let q = if q[0] < 0.0 { q.map(|c| -c) } else { q };
        Self {
            i,
            j,
            quaternion: q,
            rotation: Rotation::from_quaternion(q),
            translation,
            inliers,
        }
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.quaternion
    }

    /// Unordered endpoint pair, smaller id first.
    pub fn key(&self) -> (ImageId, ImageId) {
        if self.i < self.j {
            (self.i, self.j)
        } else {
            (self.j, self.i)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObservation {
    pub image: ImageId,
    pub pixel: Option<Vector2<f64>>,
    pub bearing: Option<Vector3<f64>>,
}

impl TrackObservation {
    pub fn pixel(image: ImageId, pixel: Vector2<f64>) -> Self {
        Self {
            image,
            pixel: Some(pixel),
            bearing: None,
        }
    }

    pub fn bearing(image: ImageId, bearing: Vector3<f64>) -> Self {
        Self {
            image,
            pixel: None,
            bearing: Some(bearing),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub point: PointId,
    pub observations: Vec<TrackObservation>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViewGraph {
    pub images: BTreeMap<ImageId, ImageNode>,
    pub intrinsics: BTreeMap<IntrinsicsId, Intrinsics>,
    pub edges: Vec<RelativePoseEdge>,
    pub tracks: Vec<Track>,
}

impl ViewGraph {
    /// Images grouped by rigid unit, each group sorted by image id.
    pub fn units(&self) -> BTreeMap<UnitId, Vec<ImageId>> {
        let mut out: BTreeMap<UnitId, Vec<ImageId>> = BTreeMap::new();
        for node in self.images.values() {
            out.entry(node.unit).or_default().push(node.id);
        }
        out
    }

    pub fn slots(&self) -> BTreeSet<SlotId> {
        self.images.values().map(|n| n.slot).collect()
    }

    /// Gauge-fixing slot: the lowest slot id.
    pub fn reference_slot(&self) -> Option<SlotId> {
        self.images.values().map(|n| n.slot).min()
    }

    /// Gauge-fixing unit: the lowest unit id.
    pub fn anchor_unit(&self) -> Option<UnitId> {
        self.images.values().map(|n| n.unit).min()
    }

    pub fn node(&self, id: ImageId) -> Option<&ImageNode> {
        self.images.get(&id)
    }

    /// Camera-frame unit ray of an observation; bearings take precedence over pixels.
    pub fn observation_bearing(&self, obs: &TrackObservation) -> Option<Vector3<f64>> {
        if let Some(b) = obs.bearing {
            return Some(b.normalize());
        }
        let px = obs.pixel?;
        let node = self.images.get(&obs.image)?;
        let intr = self.intrinsics.get(&node.intrinsics)?;
        Some(intr.bearing(&px))
    }

    /// Pixel of an observation, synthesizing an ideal pixel from a bearing if needed.
    pub fn observation_pixel(&self, obs: &TrackObservation) -> Option<Vector2<f64>> {
        if let Some(b) = obs.bearing {
            let node = self.images.get(&obs.image)?;
            let intr = self.intrinsics.get(&node.intrinsics)?;
            return intr.pixel_of_bearing(&b);
        }
        obs.pixel
    }

    /// Checks every structural invariant; an empty list means the graph is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

/// Per-slot internal rotation `R^r` and translation `t^r`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RigCalibration {
    pub rotation: BTreeMap<SlotId, Rotation>,
    pub translation: BTreeMap<SlotId, Vector3<f64>>,
}

/// Global rotation and camera center of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation,
    pub center: Vector3<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructionState {
    pub images: BTreeMap<ImageId, ImageNode>,
    pub unit_rotation: BTreeMap<UnitId, Rotation>,
    pub unit_position: BTreeMap<UnitId, Vector3<f64>>,
    pub rig: RigCalibration,
    pub points: BTreeMap<PointId, Vector3<f64>>,
    pub intrinsics: BTreeMap<IntrinsicsId, Intrinsics>,
}

impl ReconstructionState {
    /// `R_i = R^r R^g`, `c_i = c^g - R_i^T t^r`.
    pub fn camera_pose(&self, image: ImageId) -> Option<CameraPose> {
        let node = self.images.get(&image)?;
        let rr = self.rig.rotation.get(&node.slot)?;
        let tr = self.rig.translation.get(&node.slot)?;
        let rg = self.unit_rotation.get(&node.unit)?;
        let cg = self.unit_position.get(&node.unit)?;
        let rotation = rr * rg;
        let center = cg - rotation.matrix().transpose() * tr;
        Some(CameraPose { rotation, center })
    }

    /// Poses of every image whose unit and slot are both known.
    pub fn camera_poses(&self) -> BTreeMap<ImageId, CameraPose> {
        self.images
            .keys()
            .filter_map(|&id| self.camera_pose(id).map(|p| (id, p)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entity {
    Image(ImageId),
    Unit(UnitId),
    Slot(SlotId),
    Intrinsics(IntrinsicsId),
    Edge(ImageId, ImageId),
    Track(PointId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateUnitSlot,
    SlotIntrinsicsConflict,
    MissingIntrinsics,
    InvalidIntrinsics,
    MissingImage,
    SelfLoop,
    DuplicateEdge,
    NonUnitTranslation,
    NonFinite,
    TooFewObservations,
    DuplicateObservation,
    NonUnitBearing,
    MissingMeasurement,
    DuplicatePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entity: Entity,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.entity, self.message)
    }
}

fn validate(g: &ViewGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |entity, kind, message: String| {
        out.push(Violation {
            entity,
            kind,
            message,
        })
    };

    for (&id, intr) in &g.intrinsics {
        let ok = intr.focal > 0.0
            && intr.focal.is_finite()
            && intr.cx >= 0.0
            && intr.cy >= 0.0
            && intr.cx <= intr.width
            && intr.cy <= intr.height;
        if !ok {
            push(
                Entity::Intrinsics(id),
                ViolationKind::InvalidIntrinsics,
                format!("intrinsics {id}: focal must be positive and principal point inside the image"),
            );
        }
    }

    let mut unit_slot: BTreeMap<(UnitId, SlotId), ImageId> = BTreeMap::new();
    let mut slot_intr: BTreeMap<SlotId, IntrinsicsId> = BTreeMap::new();
    for node in g.images.values() {
        if let Some(prev) = unit_slot.insert((node.unit, node.slot), node.id) {
            push(
                Entity::Image(node.id),
                ViolationKind::DuplicateUnitSlot,
                format!(
                    "image {} repeats (unit {}, slot {}) of image {prev}",
                    node.id, node.unit, node.slot
                ),
            );
        }
        match slot_intr.get(&node.slot) {
            Some(&other) if other != node.intrinsics => push(
                Entity::Slot(node.slot),
                ViolationKind::SlotIntrinsicsConflict,
                format!(
                    "slot {} maps to intrinsics {other} and {}",
                    node.slot, node.intrinsics
                ),
            ),
            Some(_) => {}
            None => {
                slot_intr.insert(node.slot, node.intrinsics);
            }
        }
        if !g.intrinsics.contains_key(&node.intrinsics) {
            push(
                Entity::Image(node.id),
                ViolationKind::MissingIntrinsics,
                format!("image {} references unknown intrinsics {}", node.id, node.intrinsics),
            );
        }
    }

    let mut seen_edges = BTreeSet::new();
    for e in &g.edges {
        let entity = Entity::Edge(e.i, e.j);
        for id in [e.i, e.j] {
            if !g.images.contains_key(&id) {
                push(entity, ViolationKind::MissingImage, format!("edge references unknown image {id}"));
            }
        }
        if e.i == e.j {
            push(entity, ViolationKind::SelfLoop, format!("edge ({}, {}) is a self loop", e.i, e.j));
        }
        if !seen_edges.insert(e.key()) {
            push(entity, ViolationKind::DuplicateEdge, format!("duplicate edge ({}, {})", e.i, e.j));
        }
        let q = e.quaternion();
        if !(q.iter().all(|c| c.is_finite()) && e.translation.iter().all(|c| c.is_finite())) {
            push(entity, ViolationKind::NonFinite, format!("edge ({}, {}) has non-finite values", e.i, e.j));
        } else if (e.translation.norm() - 1.0).abs() > 1e-9 {
            push(
                entity,
                ViolationKind::NonUnitTranslation,
                format!("edge ({}, {}) translation norm {} is not 1", e.i, e.j, e.translation.norm()),
            );
        }
    }

    let mut seen_points = BTreeSet::new();
    for t in &g.tracks {
        let entity = Entity::Track(t.point);
        if !seen_points.insert(t.point) {
            push(entity, ViolationKind::DuplicatePoint, format!("point {} appears in several tracks", t.point));
        }
        if t.observations.len() < 2 {
            push(
                entity,
                ViolationKind::TooFewObservations,
                format!("track {} has {} observation(s)", t.point, t.observations.len()),
            );
        }
        let mut imgs = BTreeSet::new();
        for o in &t.observations {
            if !imgs.insert(o.image) {
                push(
                    entity,
                    ViolationKind::DuplicateObservation,
                    format!("track {} observes image {} twice", t.point, o.image),
                );
            }
            if !g.images.contains_key(&o.image) {
                push(entity, ViolationKind::MissingImage, format!("track {} references unknown image {}", t.point, o.image));
            }
            match (o.bearing, o.pixel) {
                (Some(b), _) => {
                    if (b.norm() - 1.0).abs() > 1e-9 {
                        push(
                            entity,
                            ViolationKind::NonUnitBearing,
                            format!("track {} bearing in image {} has norm {}", t.point, o.image, b.norm()),
                        );
                    }
                }
                (None, Some(px)) => {
                    if !px.iter().all(|c| c.is_finite()) {
                        push(entity, ViolationKind::NonFinite, format!("track {} pixel is not finite", t.point));
                    }
                }
                (None, None) => push(
                    entity,
                    ViolationKind::MissingMeasurement,
                    format!("track {} observation in image {} has neither pixel nor bearing", t.point, o.image),
                ),
            }
        }
    }
    out
}
