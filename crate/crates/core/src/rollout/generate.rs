//! Synthetic rollout generation.
//!
//! Each task template defines a rigid waypoint motion for the grasped
//! entity, eased with smoothstep segments. The generator renders the
//! depicted world into 2D tracks (pinhole projection plus Gaussian pixel
//! noise), per-keypoint estimated depth carrying an injected affine
//! distortion, and latent frame features. Corruption modes reproduce the
//! rollout failure classes: deformation, disappearance, misplacement, and
//! wrong-object motion.
//!
//! Motion directions come from the grasp transform: the gripper approach
//! axis (+z of the grasp rotation) points at the support surface, so "up"
//! is its negation and the gripper x-axis serves as the lateral direction.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use super::{DepthData, Rollout, RolloutMeta};
use crate::constraint::{KeypointConfig, KeypointTrajectory};
use crate::geometry::{self, Pose};
use crate::seeding;
use crate::tensorio::SceneDoc;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("unknown task template `{0}`")]
    UnknownTemplate(String),
    #[error("rollout needs at least 8 frames, got {0}")]
    TooFewFrames(usize),
    #[error("template `{template}` needs a non-grasped entity in the scene")]
    MissingTarget { template: TaskTemplate },
    #[error("keypoint {keypoint} moved behind the camera at frame {frame} (z = {z:.4})")]
    BehindCamera {
        keypoint: usize,
        frame: usize,
        z: f64,
    },
    #[error("hallucination magnitude must be non-negative, got {0}")]
    NegativeMagnitude(f64),
    #[error("onset fraction must lie in [0, 1], got {0}")]
    BadOnset(f64),
}

/// The six shipped task archetypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTemplate {
    Stack,
    Press,
    Hammer,
    Place,
    Open,
    Pour,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 6] = [
        TaskTemplate::Stack,
        TaskTemplate::Press,
        TaskTemplate::Hammer,
        TaskTemplate::Place,
        TaskTemplate::Open,
        TaskTemplate::Pour,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskTemplate::Stack => "stack",
            TaskTemplate::Press => "press",
            TaskTemplate::Hammer => "hammer",
            TaskTemplate::Place => "place",
            TaskTemplate::Open => "open",
            TaskTemplate::Pour => "pour",
        }
    }
}

impl fmt::Display for TaskTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskTemplate {
    type Err = GenerateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stack" => Ok(TaskTemplate::Stack),
            "press" => Ok(TaskTemplate::Press),
            "hammer" => Ok(TaskTemplate::Hammer),
            "place" => Ok(TaskTemplate::Place),
            "open" => Ok(TaskTemplate::Open),
            "pour" => Ok(TaskTemplate::Pour),
            other => Err(GenerateError::UnknownTemplate(other.to_string())),
        }
    }
}

/// Injected rollout corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationMode {
    None,
    /// Per-keypoint i.i.d. positional jitter breaking rigidity.
    Deformation,
    /// All keypoints vanish: visibility drops, tracks freeze.
    Disappearance,
    /// Final placement offset along a seeded horizontal direction.
    Misplacement,
    /// The motion is applied to a seeded non-grasped entity instead.
    WrongObject,
}

impl HallucinationMode {
    pub fn name(self) -> &'static str {
        match self {
            HallucinationMode::None => "none",
            HallucinationMode::Deformation => "deformation",
            HallucinationMode::Disappearance => "disappearance",
            HallucinationMode::Misplacement => "misplacement",
            HallucinationMode::WrongObject => "wrong_object",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HallucinationSpec {
    pub mode: HallucinationMode,
    /// Meters; spatial extent of the corruption where applicable.
    pub magnitude: f64,
    /// Corruption starts at frame index ⌈onset_frac · T⌉.
    pub onset_frac: f64,
    pub seed: u64,
}

impl HallucinationSpec {
    pub fn none(seed: u64) -> Self {
        Self {
            mode: HallucinationMode::None,
            magnitude: 0.0,
            onset_frac: 0.0,
            seed,
        }
    }
}

/// Sensor noise and the injected depth-scale distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Tracker pixel noise, std per coordinate.
    pub track_sigma_px: f64,
    /// True affine distortion: estimated = (metric − beta) / alpha.
    pub depth_alpha_true: f64,
    pub depth_beta_true: f64,
    /// Estimated-depth noise std, in estimated-depth units.
    pub depth_sigma: f64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            track_sigma_px: 0.0,
            depth_alpha_true: 1.0,
            depth_beta_true: 0.0,
            depth_sigma: 0.0,
        }
    }

    pub fn defaults() -> Self {
        Self {
            track_sigma_px: 1.0,
            depth_alpha_true: 2.0,
            depth_beta_true: 0.5,
            depth_sigma: 0.012,
        }
    }
}

/// The nominal (uncorrupted) motion plan behind a rollout.
#[derive(Debug, Clone)]
pub struct MotionPlan {
    /// Object pose per frame, mapping frame-1 keypoints to frame t.
    pub object_poses: Vec<Pose>,
    /// End-effector pose per frame: object pose composed with the grasp.
    pub ee_poses: Vec<Pose>,
    /// Grasped-entity centroid at the final frame.
    pub goal_centroid: Vector3<f64>,
}

/// A generated rollout with its depicted ground truth and nominal plan.
#[derive(Debug, Clone)]
pub struct GeneratedRollout {
    pub rollout: Rollout,
    /// Noise-free keypoints of the depicted (possibly corrupted) world.
    pub gt_keypoints: KeypointTrajectory,
    pub plan: MotionPlan,
}

struct Waypoint {
    frac: f64,
    offset: Vector3<f64>,
    rotvec: Vector3<f64>,
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Piecewise smoothstep interpolation through waypoints at time u ∈ [0, 1].
fn interpolate(waypoints: &[Waypoint], u: f64) -> (Vector3<f64>, Vector3<f64>) {
    debug_assert!(waypoints.len() >= 2);
    if u <= waypoints[0].frac {
        return (waypoints[0].offset, waypoints[0].rotvec);
    }
    for pair in waypoints.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if u <= b.frac {
            let span = (b.frac - a.frac).max(1e-12);
            let s = smoothstep((u - a.frac) / span);
            return (
                a.offset + (b.offset - a.offset) * s,
                a.rotvec + (b.rotvec - a.rotvec) * s,
            );
        }
    }
    let last = waypoints.last().expect("non-empty");
    (last.offset, last.rotvec)
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Template waypoints as centroid offsets and rotations about the centroid.
fn template_waypoints(
    template: TaskTemplate,
    up: Vector3<f64>,
    lateral: Vector3<f64>,
    to_target: Option<Vector3<f64>>,
) -> Result<Vec<Waypoint>, GenerateError> {
    let wp = |frac: f64, offset: Vector3<f64>, rotvec: Vector3<f64>| Waypoint { frac, offset, rotvec };
    let zero = Vector3::zeros();
    let target = || to_target.ok_or(GenerateError::MissingTarget { template });
    // Every template settles on its final pose before u = 0.9 and holds, so
    // goal-window constraints see the finished state on any frame grid.
    Ok(match template {
        TaskTemplate::Stack => {
            let goal = target()? + up * 0.05;
            vec![
                wp(0.0, zero, zero),
                wp(0.3, up * 0.12, zero),
                wp(0.65, goal + up * 0.10, zero),
                wp(0.85, goal, zero),
                wp(1.0, goal, zero),
            ]
        }
        TaskTemplate::Press => {
            vec![
                wp(0.0, zero, zero),
                wp(0.5, -up * 0.03, zero),
                wp(1.0, -up * 0.03, zero),
            ]
        }
        TaskTemplate::Hammer => {
            let goal = target()? + up * 0.04;
            vec![
                wp(0.0, zero, zero),
                wp(0.35, up * 0.15, zero),
                wp(0.65, goal + up * 0.12, zero),
                wp(0.85, goal, zero),
                wp(1.0, goal, zero),
            ]
        }
        TaskTemplate::Place => {
            let goal = target()? + up * 0.05;
            vec![
                wp(0.0, zero, zero),
                wp(0.25, up * 0.14, zero),
                wp(0.55, goal * 0.5 + up * 0.20, zero),
                wp(0.78, goal + up * 0.10, zero),
                wp(0.9, goal, zero),
                wp(1.0, goal, zero),
            ]
        }
        TaskTemplate::Open => {
            vec![
                wp(0.0, zero, zero),
                wp(0.3, up * 0.08, zero),
                wp(0.65, up * 0.08 + lateral * 0.15, zero),
                wp(0.85, up * 0.02 + lateral * 0.15, zero),
                wp(1.0, up * 0.02 + lateral * 0.15, zero),
            ]
        }
        TaskTemplate::Pour => {
            let goal = target()? + up * 0.12;
            let tilt = lateral * 1.4;
            vec![
                wp(0.0, zero, zero),
                wp(0.35, up * 0.10, zero),
                wp(0.6, goal, zero),
                wp(0.88, goal, tilt),
                wp(1.0, goal, tilt),
            ]
        }
    })
}

/// Builds the nominal motion plan for a scene and template.
pub fn nominal_plan(
    scene: &SceneDoc,
    template: TaskTemplate,
    t_len: usize,
) -> Result<MotionPlan, GenerateError> {
    if t_len < 8 {
        return Err(GenerateError::TooFewFrames(t_len));
    }
    let grasp = scene.grasp_transform;
    let up = -grasp.rotation().column(2).into_owned();
    let lateral = grasp.rotation().column(0).into_owned();

    let grasped = scene.grasped_index();
    let grasped_centroid = centroid(&entity_points(scene, grasped));
    let to_target = scene
        .entities
        .iter()
        .enumerate()
        .find(|(i, _)| *i != grasped)
        .map(|(i, _)| centroid(&entity_points(scene, i)) - grasped_centroid);

    let waypoints = template_waypoints(template, up, lateral, to_target)?;

    let mut object_poses = Vec::with_capacity(t_len);
    let mut ee_poses = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let u = t as f64 / (t_len - 1) as f64;
        let (offset, rotvec) = interpolate(&waypoints, u);
        let pose = pose_about_centroid(grasped_centroid, offset, rotvec);
        ee_poses.push(geometry::compose(&pose, &grasp));
        object_poses.push(pose);
    }
    let goal_centroid = grasped_centroid + interpolate(&waypoints, 1.0).0;
    Ok(MotionPlan {
        object_poses,
        ee_poses,
        goal_centroid,
    })
}

/// Rigid motion translating the centroid by `offset` and rotating by
/// `rotvec` about the (translated) centroid.
fn pose_about_centroid(c: Vector3<f64>, offset: Vector3<f64>, rotvec: Vector3<f64>) -> Pose {
    let r = geometry::rotation_from_rotvec(rotvec);
    let t = c + offset - r * c;
    Pose::from_parts_unchecked(r, t)
}

fn entity_points(scene: &SceneDoc, index: usize) -> Vec<Vector3<f64>> {
    scene.entities[index]
        .keypoints_3d
        .iter()
        .map(|k| Vector3::new(k[0], k[1], k[2]))
        .collect()
}

/// Generates one candidate rollout. Fully deterministic given the spec seed.
pub fn generate_rollout(
    scene: &SceneDoc,
    template: TaskTemplate,
    spec: &HallucinationSpec,
    noise: &NoiseSpec,
    t_len: usize,
) -> Result<GeneratedRollout, GenerateError> {
    if spec.magnitude < 0.0 {
        return Err(GenerateError::NegativeMagnitude(spec.magnitude));
    }
    if !(0.0..=1.0).contains(&spec.onset_frac) {
        return Err(GenerateError::BadOnset(spec.onset_frac));
    }
    let plan = nominal_plan(scene, template, t_len)?;

    let k_total = scene.total_keypoints();
    let initial = scene.initial_keypoints();
    let grasped_range = scene.keypoint_range(scene.grasped_index());
    let onset = ((spec.onset_frac * t_len as f64).ceil() as usize).min(t_len);

    let mut halluc_rng = seeding::rng_for(spec.seed, "halluc", 0);

    // Depicted keypoints: nominal motion on the grasped entity, then the
    // corruption mode applied from the onset frame onward.
    let mut depicted: Vec<Vec<Vector3<f64>>> = (0..t_len)
        .map(|t| {
            let mut frame = initial.clone();
            for k in grasped_range.clone() {
                frame[k] = geometry::apply(&plan.object_poses[t], initial[k]);
            }
            frame
        })
        .collect();

    match spec.mode {
        HallucinationMode::None | HallucinationMode::Disappearance => {}
        HallucinationMode::Deformation => {
            let jitter = Normal::new(0.0, spec.magnitude.max(1e-12)).expect("finite std");
            for frame in depicted.iter_mut().skip(onset) {
                for k in grasped_range.clone() {
                    frame[k] += Vector3::new(
                        jitter.sample(&mut halluc_rng),
                        jitter.sample(&mut halluc_rng),
                        jitter.sample(&mut halluc_rng),
                    );
                }
            }
        }
        HallucinationMode::Misplacement => {
            let up = -scene.grasp_transform.rotation().column(2).into_owned();
            let x_axis = scene.grasp_transform.rotation().column(0).into_owned();
            let y_axis = up.cross(&x_axis);
            let phi: f64 = halluc_rng.random_range(0.0..std::f64::consts::TAU);
            let dir = x_axis * phi.cos() + y_axis * phi.sin();
            let last = t_len - 1;
            for (t, frame) in depicted.iter_mut().enumerate().skip(onset) {
                let ramp = if last == onset {
                    1.0
                } else {
                    smoothstep((t - onset) as f64 / (last - onset) as f64)
                };
                for k in grasped_range.clone() {
                    frame[k] += dir * (spec.magnitude * ramp);
                }
            }
        }
        HallucinationMode::WrongObject => {
            let others: Vec<usize> = (0..scene.entities.len())
                .filter(|&i| i != scene.grasped_index())
                .collect();
            if others.is_empty() {
                return Err(GenerateError::MissingTarget { template });
            }
            let victim = others[halluc_rng.random_range(0..others.len())];
            let victim_range = scene.keypoint_range(victim);
            let victim_centroid = centroid(&entity_points(scene, victim));
            // Freeze the grasped entity at its onset pose and hand the
            // remaining relative motion to the victim entity.
            let onset_pose = plan.object_poses[onset.min(t_len - 1)];
            for t in onset..t_len {
                let rel = geometry::compose(&plan.object_poses[t], &geometry::invert(&onset_pose));
                // Recenter the relative motion on the victim's centroid.
                let rel_at_victim = recenter(&rel, victim_centroid);
                for k in grasped_range.clone() {
                    depicted[t][k] = geometry::apply(&onset_pose, initial[k]);
                }
                for k in victim_range.clone() {
                    depicted[t][k] = geometry::apply(&rel_at_victim, initial[k]);
                }
            }
        }
    }

    // Sensor rendering: tracks, per-keypoint estimated depth, visibility.
    let mut track_rng = seeding::rng_for(spec.seed, "track-noise", 0);
    let mut depth_rng = seeding::rng_for(spec.seed, "depth-noise", 0);
    let track_noise = (noise.track_sigma_px > 0.0)
        .then(|| Normal::new(0.0, noise.track_sigma_px).expect("finite std"));
    let depth_noise =
        (noise.depth_sigma > 0.0).then(|| Normal::new(0.0, noise.depth_sigma).expect("finite std"));

    let mut tracks = vec![vec![Vector2::zeros(); k_total]; t_len];
    let mut est_depth = vec![vec![0.0f64; k_total]; t_len];
    let mut visibility = vec![vec![true; k_total]; t_len];

    for t in 0..t_len {
        let vanished = spec.mode == HallucinationMode::Disappearance && t >= onset;
        for k in 0..k_total {
            if vanished {
                let prev = if t == 0 { 0 } else { t - 1 };
                tracks[t][k] = tracks[prev][k];
                est_depth[t][k] = est_depth[prev][k];
                visibility[t][k] = false;
                continue;
            }
            let p = depicted[t][k];
            if p.z <= 0.0 {
                return Err(GenerateError::BehindCamera {
                    keypoint: k,
                    frame: t,
                    z: p.z,
                });
            }
            let mut px = geometry::project(p, &scene.intrinsics)
                .expect("positive depth was checked above");
            if let Some(n) = &track_noise {
                px.x += n.sample(&mut track_rng);
                px.y += n.sample(&mut track_rng);
            }
            visibility[t][k] = scene.intrinsics.contains(px);
            tracks[t][k] = px;

            let mut d = (p.z - noise.depth_beta_true) / noise.depth_alpha_true;
            if let Some(n) = &depth_noise {
                d += n.sample(&mut depth_rng);
            }
            est_depth[t][k] = d;
        }
    }

    // Latent frame features: flattened depicted keypoints plus mean depth;
    // zeroed from the onset of a disappearance.
    let feature_dim = 3 * k_total + 1;
    let mut frames = vec![vec![0.0f64; feature_dim]; t_len];
    for t in 0..t_len {
        if spec.mode == HallucinationMode::Disappearance && t >= onset {
            continue;
        }
        let mut mean_depth = 0.0;
        for k in 0..k_total {
            let p = depicted[t][k];
            frames[t][3 * k] = p.x;
            frames[t][3 * k + 1] = p.y;
            frames[t][3 * k + 2] = p.z;
            mean_depth += p.z;
        }
        frames[t][3 * k_total] = mean_depth / k_total as f64;
    }

    let gt_frames: Result<Vec<KeypointConfig>, _> =
        depicted.into_iter().map(KeypointConfig::new).collect();
    let gt_keypoints = KeypointTrajectory::new(gt_frames.expect("finite depicted keypoints"))
        .expect("t_len >= 8");

    let rollout = Rollout {
        frames,
        tracks,
        est_depth: DepthData::PerKeypoint(est_depth),
        visibility,
        meta: RolloutMeta {
            seed: spec.seed,
            injected_mode: spec.mode,
            template: template.name().to_string(),
            magnitude: spec.magnitude,
            onset_frac: spec.onset_frac,
            track_sigma_px: noise.track_sigma_px,
            depth_alpha_true: noise.depth_alpha_true,
            depth_beta_true: noise.depth_beta_true,
            depth_sigma: noise.depth_sigma,
        },
    };
    debug_assert!(rollout.validate().is_ok());

    Ok(GeneratedRollout {
        rollout,
        gt_keypoints,
        plan,
    })
}

/// Re-expresses a centroid-relative motion about a different centroid.
fn recenter(rel: &Pose, centroid: Vector3<f64>) -> Pose {
    // rel was built about some point; extract its rotation and re-anchor:
    // p ↦ R (p − c) + c + d, where d preserves rel's centroid displacement.
    let r: Matrix3<f64> = rel.rotation();
    let moved = geometry::apply(rel, centroid);
    let t = moved - r * centroid;
    Pose::from_parts_unchecked(r, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fit_rigid;

    // A small two-entity scene on a tilted support plane; enough structure
    // to exercise every template.
    pub(crate) fn test_scene() -> SceneDoc {
        crate::tasks::build_task(TaskTemplate::Stack).scene
    }

    #[test]
    fn noiseless_generation_is_rigid() {
        let scene = test_scene();
        let spec = HallucinationSpec::none(3);
        let gen = generate_rollout(&scene, TaskTemplate::Stack, &spec, &NoiseSpec::noiseless(), 16)
            .unwrap();
        let range = scene.keypoint_range(scene.grasped_index());
        let first: Vec<_> = gen.gt_keypoints.frame(0).points()[range.clone()].to_vec();
        for t in 1..gen.gt_keypoints.len() {
            let now: Vec<_> = gen.gt_keypoints.frame(t).points()[range.clone()].to_vec();
            let fit = fit_rigid(&first, &now, None).unwrap();
            assert!(fit.residual < 1e-12, "frame {t}: residual {}", fit.residual);
        }
    }

    #[test]
    fn deformation_breaks_rigidity() {
        let scene = test_scene();
        let spec = HallucinationSpec {
            mode: HallucinationMode::Deformation,
            magnitude: 0.03,
            onset_frac: 0.25,
            seed: 5,
        };
        let gen = generate_rollout(&scene, TaskTemplate::Stack, &spec, &NoiseSpec::noiseless(), 16)
            .unwrap();
        let range = scene.keypoint_range(scene.grasped_index());
        let first: Vec<_> = gen.gt_keypoints.frame(0).points()[range.clone()].to_vec();
        let last: Vec<_> = gen.gt_keypoints.frame(15).points()[range.clone()].to_vec();
        let fit = fit_rigid(&first, &last, None).unwrap();
        assert!(fit.residual > 1e-4, "residual {}", fit.residual);
    }

    #[test]
    fn disappearance_hides_everything_after_onset() {
        let scene = test_scene();
        let spec = HallucinationSpec {
            mode: HallucinationMode::Disappearance,
            magnitude: 0.0,
            onset_frac: 0.5,
            seed: 9,
        };
        let gen = generate_rollout(&scene, TaskTemplate::Stack, &spec, &NoiseSpec::noiseless(), 16)
            .unwrap();
        for t in 0..8 {
            assert!(gen.rollout.visibility[t].iter().all(|&v| v), "frame {t}");
        }
        for t in 8..16 {
            assert!(gen.rollout.visibility[t].iter().all(|&v| !v), "frame {t}");
            assert_eq!(gen.rollout.tracks[t], gen.rollout.tracks[7]);
        }
    }

    #[test]
    fn misplacement_offsets_final_centroid_by_magnitude() {
        let scene = test_scene();
        let magnitude = 0.08;
        let spec = HallucinationSpec {
            mode: HallucinationMode::Misplacement,
            magnitude,
            onset_frac: 0.25,
            seed: 21,
        };
        let gen = generate_rollout(&scene, TaskTemplate::Stack, &spec, &NoiseSpec::noiseless(), 16)
            .unwrap();
        let range = scene.keypoint_range(scene.grasped_index());
        let final_centroid =
            centroid(&gen.gt_keypoints.frame(15).points()[range].to_vec());
        let err = (final_centroid - gen.plan.goal_centroid).norm();
        assert!((err - magnitude).abs() < 1e-9, "offset {err}");
    }

    #[test]
    fn wrong_object_keeps_grasped_static_after_onset() {
        let scene = test_scene();
        let spec = HallucinationSpec {
            mode: HallucinationMode::WrongObject,
            magnitude: 0.0,
            onset_frac: 0.0,
            seed: 2,
        };
        let gen = generate_rollout(&scene, TaskTemplate::Stack, &spec, &NoiseSpec::noiseless(), 16)
            .unwrap();
        let range = scene.keypoint_range(scene.grasped_index());
        let first: Vec<_> = gen.gt_keypoints.frame(0).points()[range.clone()].to_vec();
        let last: Vec<_> = gen.gt_keypoints.frame(15).points()[range.clone()].to_vec();
        for (a, b) in first.iter().zip(&last) {
            assert!((a - b).norm() < 1e-12);
        }
        // Someone else moved.
        let moved: f64 = gen
            .gt_keypoints
            .frame(15)
            .points()
            .iter()
            .zip(gen.gt_keypoints.frame(0).points())
            .map(|(a, b)| (a - b).norm())
            .sum();
        assert!(moved > 0.05, "total displacement {moved}");
    }

    #[test]
    fn generation_is_deterministic() {
        let scene = test_scene();
        let spec = HallucinationSpec {
            mode: HallucinationMode::Deformation,
            magnitude: 0.02,
            onset_frac: 0.3,
            seed: 77,
        };
        let noise = NoiseSpec::defaults();
        let a = generate_rollout(&scene, TaskTemplate::Stack, &spec, &noise, 16).unwrap();
        let b = generate_rollout(&scene, TaskTemplate::Stack, &spec, &noise, 16).unwrap();
        assert_eq!(a.rollout.tracks, b.rollout.tracks);
        assert_eq!(a.rollout.frames, b.rollout.frames);
        match (&a.rollout.est_depth, &b.rollout.est_depth) {
            (DepthData::PerKeypoint(x), DepthData::PerKeypoint(y)) => assert_eq!(x, y),
            _ => panic!("expected per-keypoint depth"),
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let scene = test_scene();
        let mut spec = HallucinationSpec::none(0);
        assert!(matches!(
            generate_rollout(&scene, TaskTemplate::Stack, &spec, &NoiseSpec::noiseless(), 4),
            Err(GenerateError::TooFewFrames(4))
        ));
        spec.magnitude = -1.0;
        assert!(matches!(
            generate_rollout(&scene, TaskTemplate::Stack, &spec, &NoiseSpec::noiseless(), 16),
            Err(GenerateError::NegativeMagnitude(_))
        ));
    }
}
