//! Global structure-from-motion for rigidly mounted multi-camera systems.
//!
//! The pipeline recovers internal camera poses of the rig, per-instant rig
//! poses and sparse 3D points from a view graph of relative poses and
//! feature tracks:
//!
//! 1. decoupled rotation averaging ([`rotation`]),
//! 2. hybrid translation averaging ([`translation`]),
//! 3. multi-camera bundle adjustment ([`ba`]).
//!
//! Geometry is generic over the scalar type (see [`scalar::Scalar`]); the
//! pipeline itself runs in `f64` through the aliases below.

pub mod ba;
pub mod rotation;
pub mod scalar;
pub mod scene;
pub mod so3;

pub mod synth;
pub mod translation;
pub mod solver;

pub use scalar::Scalar;

/// Double-precision rotation used throughout the pipeline.
pub type Rotation = so3::Rot3<f64>;
/// Single-precision rotation.
pub type Rotation32 = so3::Rot3<f32>;
/// Axis-angle vector (axis scaled by angle, radians).
pub type AxisAngle = nalgebra::Vector3<f64>;
