//! Point-set registration with Gaussian mixtures.
//!
//! The toolkit covers the classical side (EM registration, point-to-point
//! ICP, the weighted SVD alignment solver they share), the learned side
//! (a membership network built from attention layers that gradually shift
//! an estimated common reference point of two partial scans toward the
//! origin, feeding a closed-form mixture-registration solve), synthetic
//! pair generation with controlled overlap, and the evaluation metrics
//! and CLI around them.

pub mod arps;
pub mod benchrun;
pub mod data;
pub mod error;
pub mod features;
pub mod gmm;
pub mod icp;
pub mod metrics;
pub mod pointset;
pub mod rigid;
pub mod seed;
pub mod spatial;

pub use error::{Error, Result};
pub use pointset::{normalize_to_unit_cube, PointSet};
pub use rigid::{
    random_transform, rotation_angle_deg, weighted_umeyama, PoseSamplingConfig, RigidTransform,
};
