//! Grasp-conditioned motion retargeting.
//!
//! Object poses are recovered per frame by a rigid fit of the grasped
//! entity's keypoints from the first frame to frame t (no chaining, so
//! tracking drift does not accumulate); composing with the fixed grasp
//! transform yields the end-effector sequence. The per-frame fit residual
//! doubles as a rigidity diagnostic: it is zero on rigid motion and
//! strictly positive under deformation.

use nalgebra::Vector3;
use thiserror::Error;

use crate::constraint::{KeypointConfig, KeypointTrajectory};
use crate::geometry::{self, fit_rigid, GeometryError, Pose};
use crate::tensorio::SceneDoc;

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("frame {frame} has only {count} keypoints visible in both frame 1 and frame {frame}; need 3")]
    TooFewVisible { frame: usize, count: usize },
    #[error("rigid fit failed at frame {frame}: {source}")]
    Fit {
        frame: usize,
        source: GeometryError,
    },
    #[error("trajectory has {got} keypoints, scene has {expected}")]
    KeypointMismatch { got: usize, expected: usize },
    #[error("visibility table does not match the trajectory shape")]
    VisibilityShape,
}

/// Retargeting output: end-effector poses, per-frame fit residuals (meters),
/// and the recovered object poses.
#[derive(Debug, Clone)]
pub struct RetargetResult {
    pub initial_trajectory: Vec<Pose>,
    pub residuals: Vec<f64>,
    pub object_poses: Vec<Pose>,
}

impl RetargetResult {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Recovers the end-effector pose sequence from a lifted keypoint
/// trajectory.
///
/// Only keypoints of the grasped entity that are visible in both the first
/// frame and frame t participate in the fit; pass `None` for fully visible
/// trajectories. The first frame maps to the identity object pose, so the
/// trajectory starts exactly at the grasp transform.
pub fn retarget(
    lifted: &KeypointTrajectory,
    visibility: Option<&[Vec<bool>]>,
    scene: &SceneDoc,
) -> Result<RetargetResult, RetargetError> {
    let k = scene.total_keypoints();
    if lifted.keypoint_count() != k {
        return Err(RetargetError::KeypointMismatch {
            got: lifted.keypoint_count(),
            expected: k,
        });
    }
    if let Some(vis) = visibility {
        if vis.len() != lifted.len() || vis.iter().any(|row| row.len() != k) {
            return Err(RetargetError::VisibilityShape);
        }
    }
    let grasped = scene.keypoint_range(scene.grasped_index());
    let grasp = scene.grasp_transform;
    let visible_at = |t: usize, j: usize| visibility.is_none_or(|v| v[t][j]);

    let t_len = lifted.len();
    let mut object_poses = Vec::with_capacity(t_len);
    let mut residuals = Vec::with_capacity(t_len);
    let mut ee = Vec::with_capacity(t_len);

    for t in 0..t_len {
        let (pose, residual) = if t == 0 {
            (Pose::identity(), 0.0)
        } else {
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for j in grasped.clone() {
                if visible_at(0, j) && visible_at(t, j) {
                    src.push(lifted.frame(0).point(j));
                    dst.push(lifted.frame(t).point(j));
                }
            }
            if src.len() < 3 {
                return Err(RetargetError::TooFewVisible {
                    frame: t,
                    count: src.len(),
                });
            }
            let fit = fit_rigid(&src, &dst, None)
                .map_err(|source| RetargetError::Fit { frame: t, source })?;
            (fit.pose, fit.residual)
        };
        ee.push(geometry::compose(&pose, &grasp));
        residuals.push(residual);
        object_poses.push(pose);
    }
    Ok(RetargetResult {
        initial_trajectory: ee,
        residuals,
        object_poses,
    })
}

/// Keypoint configuration induced by an end-effector pose: the grasped
/// entity's initial keypoints carried by the object pose implied through
/// the fixed grasp transform; all other keypoints stay at their initial
/// positions.
pub fn gripper_keypoints(xi: &Pose, scene: &SceneDoc) -> KeypointConfig {
    let object_pose = geometry::compose(xi, &geometry::invert(&scene.grasp_transform));
    induced_config(&object_pose, scene)
}

/// Same as [`gripper_keypoints`] but from the object pose directly.
pub fn induced_config(object_pose: &Pose, scene: &SceneDoc) -> KeypointConfig {
    let initial = scene.initial_keypoints();
    let grasped = scene.keypoint_range(scene.grasped_index());
    let points: Vec<Vector3<f64>> = initial
        .iter()
        .enumerate()
        .map(|(j, p)| {
            if grasped.contains(&j) {
                geometry::apply(object_pose, *p)
            } else {
                *p
            }
        })
        .collect();
    KeypointConfig::new(points).expect("rigid transform of finite points is finite")
}

/// Keypoint trajectory induced by an end-effector pose sequence.
pub fn induced_trajectory(trajectory: &[Pose], scene: &SceneDoc) -> KeypointTrajectory {
    KeypointTrajectory::new(
        trajectory
            .iter()
            .map(|xi| gripper_keypoints(xi, scene))
            .collect(),
    )
    .expect("pose sequences are non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply, compose, invert, rotation_distance};
    use crate::rollout::{generate_rollout, HallucinationSpec, NoiseSpec, TaskTemplate};
    use crate::tasks::build_task;

    fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
        rotation_distance(a, b) < tol && (a.translation() - b.translation()).norm() < tol
    }

    #[test]
    fn static_trajectory_stays_at_grasp() {
        let build = build_task(TaskTemplate::Stack);
        let initial = build.scene.initial_keypoints();
        let frames = vec![KeypointConfig::new(initial).unwrap(); 6];
        let traj = KeypointTrajectory::new(frames).unwrap();
        let result = retarget(&traj, None, &build.scene).unwrap();
        for (xi, r) in result.initial_trajectory.iter().zip(&result.residuals) {
            assert!(pose_close(xi, &build.scene.grasp_transform, 1e-9));
            assert!(*r < 1e-12);
        }
    }

    #[test]
    fn pure_translation_shifts_grasp() {
        let build = build_task(TaskTemplate::Stack);
        let shift = Vector3::new(0.0, 0.0, 0.1);
        let initial = build.scene.initial_keypoints();
        let grasped = build.scene.keypoint_range(build.scene.grasped_index());
        let mut moved = initial.clone();
        for j in grasped {
            moved[j] += shift;
        }
        let traj = KeypointTrajectory::new(vec![
            KeypointConfig::new(initial).unwrap(),
            KeypointConfig::new(moved).unwrap(),
        ])
        .unwrap();
        let result = retarget(&traj, None, &build.scene).unwrap();
        let expected = build.scene.grasp_transform.translation() + shift;
        assert!((result.initial_trajectory[1].translation() - expected).norm() < 1e-9);
        assert!(result.residuals[1] < 1e-12);
    }

    #[test]
    fn noiseless_rollout_round_trips_to_nominal_path() {
        for template in TaskTemplate::ALL {
            let build = build_task(template);
            let gen = generate_rollout(
                &build.scene,
                template,
                &HallucinationSpec::none(17),
                &NoiseSpec::noiseless(),
                16,
            )
            .unwrap();
            let result = retarget(&gen.gt_keypoints, None, &build.scene).unwrap();
            for (got, want) in result.initial_trajectory.iter().zip(&gen.plan.ee_poses) {
                assert!(
                    rotation_distance(got, want) < 1e-6,
                    "{template}: rotation error {}",
                    rotation_distance(got, want)
                );
                assert!((got.translation() - want.translation()).norm() < 1e-6, "{template}");
            }
        }
    }

    #[test]
    fn deformation_shows_in_residuals() {
        use crate::rollout::HallucinationMode;
        let build = build_task(TaskTemplate::Stack);
        let gen = generate_rollout(
            &build.scene,
            TaskTemplate::Stack,
            &HallucinationSpec {
                mode: HallucinationMode::Deformation,
                magnitude: 0.03,
                onset_frac: 0.25,
                seed: 23,
            },
            &NoiseSpec::noiseless(),
            16,
        )
        .unwrap();
        let result = retarget(&gen.gt_keypoints, None, &build.scene).unwrap();
        assert!(result.max_residual() > 1e-3, "max {}", result.max_residual());
        assert!(result.residuals[0] == 0.0);
    }

    #[test]
    fn visibility_intersection_rule() {
        let build = build_task(TaskTemplate::Stack);
        let gen = generate_rollout(
            &build.scene,
            TaskTemplate::Stack,
            &HallucinationSpec::none(3),
            &NoiseSpec::noiseless(),
            8,
        )
        .unwrap();
        let k = build.scene.total_keypoints();
        let grasped: Vec<usize> = build.scene.keypoint_range(build.scene.grasped_index()).collect();
        // Hide all but two grasped keypoints at frame 3.
        let mut vis = vec![vec![true; k]; 8];
        for &j in &grasped[2..] {
            vis[3][j] = false;
        }
        let err = retarget(&gen.gt_keypoints, Some(&vis), &build.scene).unwrap_err();
        assert!(matches!(err, RetargetError::TooFewVisible { frame: 3, count: 2 }));
    }

    #[test]
    fn gripper_keypoints_identity_and_offset() {
        let build = build_task(TaskTemplate::Stack);
        let scene = &build.scene;
        let config = gripper_keypoints(&scene.grasp_transform, scene);
        for (a, b) in config.points().iter().zip(scene.initial_keypoints()) {
            assert!((a - b).norm() < 1e-12);
        }

        let shift = Pose::from_rotvec_translation(Vector3::zeros(), Vector3::new(0.05, 0.0, 0.0));
        let xi = compose(&shift, &scene.grasp_transform);
        let shifted = gripper_keypoints(&xi, scene);
        let grasped = scene.keypoint_range(scene.grasped_index());
        for (j, (a, b)) in shifted
            .points()
            .iter()
            .zip(scene.initial_keypoints())
            .enumerate()
        {
            if grasped.contains(&j) {
                assert!((a - b - Vector3::new(0.05, 0.0, 0.0)).norm() < 1e-12);
            } else {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn gripper_keypoints_matches_direct_composition_oracle() {
        let build = build_task(TaskTemplate::Pour);
        let scene = &build.scene;
        let mut rng = crate::seeding::rng_from(61);
        use rand::Rng;
        for _ in 0..200 {
            let rv = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let tr = Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.6..1.2),
            );
            let object_pose = Pose::from_rotvec_translation(rv, tr);
            let xi = compose(&object_pose, &scene.grasp_transform);
            let config = gripper_keypoints(&xi, scene);
            // Independent route: T_obj = ξ · T_grasp⁻¹ applied pointwise.
            let t_obj = compose(&xi, &invert(&scene.grasp_transform));
            let grasped = scene.keypoint_range(scene.grasped_index());
            for (j, p0) in scene.initial_keypoints().iter().enumerate() {
                let expected = if grasped.contains(&j) {
                    apply(&t_obj, *p0)
                } else {
                    *p0
                };
                assert!((config.point(j) - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn retarget_then_induce_reproduces_grasped_keypoints() {
        let build = build_task(TaskTemplate::Hammer);
        let gen = generate_rollout(
            &build.scene,
            TaskTemplate::Hammer,
            &HallucinationSpec::none(41),
            &NoiseSpec::noiseless(),
            12,
        )
        .unwrap();
        let result = retarget(&gen.gt_keypoints, None, &build.scene).unwrap();
        let grasped = build.scene.keypoint_range(build.scene.grasped_index());
        for t in 0..12 {
            let induced = gripper_keypoints(&result.initial_trajectory[t], &build.scene);
            for j in grasped.clone() {
                let err = (induced.point(j) - gen.gt_keypoints.frame(t).point(j)).norm();
                assert!(err <= result.residuals[t] + 1e-9, "frame {t}, kp {j}: {err}");
            }
        }
    }
}
