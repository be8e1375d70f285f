//! Constraint-aligned video-to-action pipeline over synthetic keypoint
//! scenes.
//!
//! The crate covers the full loop: candidate rollout generation with
//! injectable corruption modes, latent-world-model plausibility scoring,
//! constraint-guided sequential selection, 3D lifting with depth
//! calibration, grasp-conditioned motion retargeting, and constraint-based
//! SE(3) trajectory optimization. Scenes, constraint sets, and reports are
//! plain JSON documents; dense arrays use the EATN binary tensor format.

pub mod constraint;
pub mod geometry;
pub mod harness;
pub mod optimize;
pub mod retarget;
pub mod rollout;
pub mod seeding;
pub mod selection;
pub mod tasks;
pub mod tensorio;

pub use constraint::{aggregate_cost, ConstraintSet, KeypointConfig, KeypointTrajectory};
pub use geometry::{DepthCalibration, Intrinsics, Pose};
pub use rollout::{Rollout, TaskTemplate};
pub use tensorio::{ReportDoc, SceneDoc, Tensor};
