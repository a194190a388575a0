//! Geometry, synthetic data, ground-truth flow, robust pose fitting and
//! retrieval evaluation for radar-to-LiDAR-map localization.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod database;
pub mod dataset;
pub mod evaluation;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod pose_solver;
pub mod scalar;
pub mod synthworld;

pub use scalar::Scalar;

pub type Pose2d = geometry::Pose2<f64>;
pub type Pose2f = geometry::Pose2<f32>;
pub type PointCloud2d = geometry::PointCloud2<f64>;
pub type PointCloud2f = geometry::PointCloud2<f32>;
pub type Correspondences = pose_solver::CorrespondenceSet<f64>;
