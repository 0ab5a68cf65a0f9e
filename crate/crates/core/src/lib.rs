//! LiDAR-inertial odometry with normal-angle constraints, Hessian-based
//! degeneracy scoring and confidence-gated voxel map maintenance, plus a
//! planar-world simulator and trajectory evaluation.

pub mod dataset;
pub mod degeneracy;
pub mod estimator;
pub mod evaluation;
pub mod geometry;
pub mod imu;
pub mod residuals;
pub mod scan;
pub mod simulator;
pub mod voxel_map;
