//! Hierarchical point cloud registration.
//!
//! Dual-level (local / global receptive field) descriptors and detectors,
//! the supervision math used to train them, and a global-to-local matching
//! pipeline: coarse RANSAC over high-level keypoint matches, then low-level
//! matching inside local cells and a weighted SVD solve.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar type for the common cases.

pub mod cloud;
pub mod descriptors;
pub mod detectors;
pub mod error;
pub mod index;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod scalar;
pub mod synth;
pub mod training;
pub mod verify;

pub use cloud::{apply_transform, compose, invert, PointCloud, RigidTransform};
pub use descriptors::{compute_descriptors, estimate_normals, feature_distance, DescriptorParams, DescriptorSet, Level};
pub use error::{Error, Result, Stage};
pub use index::{build_index, SpatialIndex};
pub use scalar::Real;

pub type PointCloud64 = PointCloud<f64>;
pub type PointCloud32 = PointCloud<f32>;
pub type RigidTransform64 = RigidTransform<f64>;
pub type RigidTransform32 = RigidTransform<f32>;
pub type SpatialIndex64 = SpatialIndex<f64>;
pub type DescriptorSet64 = DescriptorSet<f64>;
pub type DescriptorSet32 = DescriptorSet<f32>;
