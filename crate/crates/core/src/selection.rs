//! Rollout lifting, spatial scoring, and joint sequential selection.
//!
//! Candidates are ranked by visual plausibility (ascending) and their
//! spatial constraint cost is evaluated lazily in that order; the first
//! candidate at or below the acceptance threshold wins. Lifting is the
//! expensive step, so the number of spatial evaluations equals the visit
//! rank of the accepted candidate.

use nalgebra::Vector2;
use thiserror::Error;

use crate::constraint::{aggregate_cost, BoundConstraintSet, KeypointConfig, KeypointTrajectory};
use crate::geometry::{
    back_project, calibrate_depth, calibrate_depth_pairs, DepthCalibration, GeometryError,
    MAX_VALID_DEPTH,
};
use crate::rollout::{visual_plausibility, DepthData, LatentWorldModel, Rollout, WorldModelError};
use crate::tensorio::{SceneDoc, Tensor};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("depth calibration failed: {0}")]
    Calibration(#[from] GeometryError),
    #[error("all keypoints invisible at frame {frame}")]
    AllInvisible { frame: usize },
    #[error("rollout carries full depth frames but no reference depth map was supplied")]
    MissingReferenceDepth,
    #[error("rollout has {got} keypoints, scene has {expected}")]
    KeypointMismatch { got: usize, expected: usize },
    #[error("rollout shape: {0}")]
    Shape(#[from] crate::rollout::RolloutError),
    #[error("lifted keypoints invalid: {0}")]
    Constraint(#[from] crate::constraint::ConstraintError),
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("visual plausibility failed for rollout {index}: {source}")]
    Visual {
        index: usize,
        source: WorldModelError,
    },
    #[error("no candidate passed epsilon = {epsilon}; evaluated: {summary}")]
    NoCandidatePassed { epsilon: f64, summary: String },
    #[error("every evaluated candidate failed spatial evaluation: {summary}")]
    AllCandidatesFailed { summary: String },
}

/// Result of lifting one rollout into metric 3D.
#[derive(Debug, Clone)]
pub struct LiftResult {
    pub trajectory: KeypointTrajectory,
    pub calibration: DepthCalibration,
}

/// Lifts a rollout's 2D tracks into a metric 3D keypoint trajectory.
///
/// Depth calibration is fit once from the first frame and applied to every
/// frame. With per-keypoint depth the reference values are the scene's
/// initial keypoint depths (the observation the tracks start from); with
/// full depth frames the first estimated map is fit against
/// `reference_depth` under the default validity rule (reference in
/// (0, 10] m). Invisible points freeze at their last visible 3D estimate,
/// starting from the scene keypoints for points never seen.
pub fn lift_to_3d(
    rollout: &Rollout,
    scene: &SceneDoc,
    reference_depth: Option<&Tensor>,
) -> Result<LiftResult, LiftError> {
    rollout.validate()?;
    let k = scene.total_keypoints();
    if rollout.keypoint_count() != k {
        return Err(LiftError::KeypointMismatch {
            got: rollout.keypoint_count(),
            expected: k,
        });
    }
    let initial = scene.initial_keypoints();

    let calibration = match &rollout.est_depth {
        DepthData::PerKeypoint(est) => {
            let pairs: Vec<(f64, f64)> = (0..k)
                .filter(|&j| rollout.visibility[0][j])
                .map(|j| (est[0][j], initial[j].z))
                .filter(|&(_, r)| r > 0.0 && r <= MAX_VALID_DEPTH)
                .collect();
            if pairs.is_empty() {
                return Err(LiftError::AllInvisible { frame: 0 });
            }
            calibrate_depth_pairs(&pairs)?
        }
        DepthData::Full { height, width, frames } => {
            let reference = reference_depth.ok_or(LiftError::MissingReferenceDepth)?;
            let est0 = Tensor::from_f64(vec![*height, *width], &frames[0])
                .map_err(crate::rollout::RolloutError::from)?;
            calibrate_depth(&est0, reference, None)?
        }
    };

    let t_len = rollout.frame_count();
    let mut last_position = initial.clone();
    let mut frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if rollout.visibility[t].iter().all(|&v| !v) {
            return Err(LiftError::AllInvisible { frame: t });
        }
        let mut config = Vec::with_capacity(k);
        for j in 0..k {
            if rollout.visibility[t][j] {
                let px = rollout.tracks[t][j];
                let est = estimated_depth_at(rollout, t, j, px);
                let metric = calibration.apply(est);
                let p = back_project(px, metric, &scene.intrinsics)?;
                last_position[j] = p;
            }
            config.push(last_position[j]);
        }
        frames.push(KeypointConfig::new(config)?);
    }
    Ok(LiftResult {
        trajectory: KeypointTrajectory::new(frames)?,
        calibration,
    })
}

fn estimated_depth_at(rollout: &Rollout, t: usize, j: usize, px: Vector2<f64>) -> f64 {
    match &rollout.est_depth {
        DepthData::PerKeypoint(est) => est[t][j],
        DepthData::Full { height, width, frames } => {
            let x = (px.x.round() as i64).clamp(0, *width as i64 - 1) as usize;
            let y = (px.y.round() as i64).clamp(0, *height as i64 - 1) as usize;
            frames[t][y * width + x]
        }
    }
}

/// Spatial constraint score: aggregate violation of the lifted trajectory.
pub fn spatial_score(
    rollout: &Rollout,
    scene: &SceneDoc,
    cs: &BoundConstraintSet,
    reference_depth: Option<&Tensor>,
) -> Result<f64, LiftError> {
    let lifted = lift_to_3d(rollout, scene, reference_depth)?;
    Ok(aggregate_cost(cs, &lifted.trajectory)?)
}

/// Stopping rule for the sequential scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// Return the best evaluated spatial score, flagged in the report.
    BestSpatial,
    /// Fail the selection outright.
    Error,
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    /// Acceptance threshold on the spatial cost.
    pub epsilon: f64,
    /// Cap on spatial evaluations; `None` evaluates as far as needed.
    pub max_evaluated: Option<usize>,
    pub fallback: Fallback,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            max_evaluated: None,
            fallback: Fallback::BestSpatial,
        }
    }
}

/// Scoring record for one candidate.
#[derive(Debug, Clone)]
pub struct ScoredRollout {
    pub index: usize,
    pub s_vis: f64,
    pub s_spatial: Option<f64>,
    pub accepted: bool,
    /// Spatial evaluation failure, if any; such candidates are rejected.
    pub eval_error: Option<String>,
}

/// Outcome of the sequential selection scan.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub scored: Vec<ScoredRollout>,
    pub selected_index: usize,
    pub fallback_used: bool,
    /// Number of spatial evaluations performed (the laziness invariant).
    pub spatial_evaluations: usize,
}

/// Sequential selection over precomputed visual scores and a lazy spatial
/// evaluator. Candidates are visited in ascending `s_vis` order (ties by
/// original index); the first with spatial cost ≤ ε is accepted and no
/// further candidate is evaluated.
pub fn select_from_scores<F>(
    s_vis: &[f64],
    mut spatial: F,
    cfg: &SelectionConfig,
) -> Result<SelectionOutcome, SelectError>
where
    F: FnMut(usize) -> Result<f64, String>,
{
    if s_vis.is_empty() {
        return Err(SelectError::EmptyBatch);
    }
    let mut order: Vec<usize> = (0..s_vis.len()).collect();
    order.sort_by(|&a, &b| s_vis[a].total_cmp(&s_vis[b]).then(a.cmp(&b)));

    let mut scored: Vec<ScoredRollout> = s_vis
        .iter()
        .enumerate()
        .map(|(index, &v)| ScoredRollout {
            index,
            s_vis: v,
            s_spatial: None,
            accepted: false,
            eval_error: None,
        })
        .collect();

    let budget = cfg.max_evaluated.unwrap_or(usize::MAX).min(s_vis.len());
    let mut evaluations = 0usize;
    let mut best: Option<(usize, f64)> = None;

    for &idx in &order {
        if evaluations >= budget {
            break;
        }
        evaluations += 1;
        match spatial(idx) {
            Ok(cost) => {
                scored[idx].s_spatial = Some(cost);
                if cost <= cfg.epsilon {
                    scored[idx].accepted = true;
                    return Ok(SelectionOutcome {
                        scored,
                        selected_index: idx,
                        fallback_used: false,
                        spatial_evaluations: evaluations,
                    });
                }
                if best.is_none_or(|(_, b)| cost < b) {
                    best = Some((idx, cost));
                }
            }
            Err(message) => scored[idx].eval_error = Some(message),
        }
    }

    let summary = summarize(&scored, &order, evaluations);
    match cfg.fallback {
        Fallback::Error => Err(SelectError::NoCandidatePassed {
            epsilon: cfg.epsilon,
            summary,
        }),
        Fallback::BestSpatial => {
            let (selected_index, _) =
                best.ok_or(SelectError::AllCandidatesFailed { summary })?;
            Ok(SelectionOutcome {
                scored,
                selected_index,
                fallback_used: true,
                spatial_evaluations: evaluations,
            })
        }
    }
}

fn summarize(scored: &[ScoredRollout], order: &[usize], evaluations: usize) -> String {
    order
        .iter()
        .take(evaluations)
        .map(|&i| match (&scored[i].s_spatial, &scored[i].eval_error) {
            (Some(c), _) => format!("#{i}: {c:.6}"),
            (None, Some(e)) => format!("#{i}: error ({e})"),
            _ => format!("#{i}: unevaluated"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Full selection over a rollout batch: visual plausibility for every
/// candidate, then the lazy sequential spatial scan.
///
/// Returns the outcome together with the lifted trajectory of the selected
/// rollout (evaluated at most once per candidate).
pub fn select(
    batch: &[Rollout],
    scene: &SceneDoc,
    cs: &BoundConstraintSet,
    wm: &dyn LatentWorldModel,
    cfg: &SelectionConfig,
    reference_depth: Option<&Tensor>,
) -> Result<(SelectionOutcome, LiftResult), SelectError> {
    if batch.is_empty() {
        return Err(SelectError::EmptyBatch);
    }
    let mut s_vis = Vec::with_capacity(batch.len());
    for (index, rollout) in batch.iter().enumerate() {
        let v = visual_plausibility(&rollout.frames, wm)
            .map_err(|source| SelectError::Visual { index, source })?;
        s_vis.push(v);
    }

    let mut lifts: Vec<Option<LiftResult>> = vec![None; batch.len()];
    let outcome = {
        let lifts = &mut lifts;
        select_from_scores(
            &s_vis,
            |idx| {
                let lift = lift_to_3d(&batch[idx], scene, reference_depth)
                    .map_err(|e| e.to_string())?;
                let cost =
                    aggregate_cost(cs, &lift.trajectory).map_err(|e| e.to_string())?;
                lifts[idx] = Some(lift);
                Ok(cost)
            },
            cfg,
        )?
    };
    let lift = lifts[outcome.selected_index]
        .take()
        .expect("selected candidate was evaluated");
    Ok((outcome, lift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{
        generate_rollout, HallucinationSpec, NoiseSpec, TaskTemplate, ToyWorldModel,
    };
    use crate::tasks::build_task;

    #[test]
    fn noiseless_lift_matches_ground_truth() {
        let build = build_task(TaskTemplate::Stack);
        let gen = generate_rollout(
            &build.scene,
            TaskTemplate::Stack,
            &HallucinationSpec::none(11),
            &NoiseSpec::noiseless(),
            16,
        )
        .unwrap();
        let lift = lift_to_3d(&gen.rollout, &build.scene, None).unwrap();
        assert!((lift.calibration.alpha - 1.0).abs() < 1e-9);
        assert!(lift.calibration.beta.abs() < 1e-9);
        for t in 0..16 {
            for (a, b) in lift
                .trajectory
                .frame(t)
                .points()
                .iter()
                .zip(gen.gt_keypoints.frame(t).points())
            {
                assert!((a - b).norm() < 1e-6, "frame {t}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn injected_affine_distortion_is_recovered() {
        let build = build_task(TaskTemplate::Pour);
        let noise = NoiseSpec {
            track_sigma_px: 0.0,
            depth_alpha_true: 2.0,
            depth_beta_true: 0.5,
            depth_sigma: 0.0,
        };
        let gen = generate_rollout(
            &build.scene,
            TaskTemplate::Pour,
            &HallucinationSpec::none(5),
            &noise,
            16,
        )
        .unwrap();
        let lift = lift_to_3d(&gen.rollout, &build.scene, None).unwrap();
        assert!((lift.calibration.alpha - 2.0).abs() < 1e-6);
        assert!((lift.calibration.beta - 0.5).abs() < 1e-6);
        for t in 0..16 {
            for (a, b) in lift
                .trajectory
                .frame(t)
                .points()
                .iter()
                .zip(gen.gt_keypoints.frame(t).points())
            {
                assert!((a - b).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn disappearance_makes_lift_fail_hard() {
        use crate::rollout::HallucinationMode;
        let build = build_task(TaskTemplate::Stack);
        let gen = generate_rollout(
            &build.scene,
            TaskTemplate::Stack,
            &HallucinationSpec {
                mode: HallucinationMode::Disappearance,
                magnitude: 0.0,
                onset_frac: 0.5,
                seed: 8,
            },
            &NoiseSpec::noiseless(),
            16,
        )
        .unwrap();
        assert!(matches!(
            lift_to_3d(&gen.rollout, &build.scene, None),
            Err(LiftError::AllInvisible { frame: 8 })
        ));
    }

    #[test]
    fn worked_selection_example() {
        // s_vis = [0.3, 0.1, 0.2], s_spatial = [0.0, 9.0, 0.0], ε = 0.5:
        // visit order (1, 2, 0); candidate 1 fails, candidate 2 passes.
        let spatial = [0.0, 9.0, 0.0];
        let mut evals = Vec::new();
        let outcome = select_from_scores(
            &[0.3, 0.1, 0.2],
            |i| {
                evals.push(i);
                Ok(spatial[i])
            },
            &SelectionConfig {
                epsilon: 0.5,
                ..SelectionConfig::default()
            },
        )
        .unwrap();
        assert_eq!(outcome.selected_index, 2);
        assert_eq!(outcome.spatial_evaluations, 2);
        assert_eq!(evals, vec![1, 2]);
        assert!(!outcome.fallback_used);
        assert!(outcome.scored[2].accepted);
        assert!(outcome.scored[0].s_spatial.is_none());
    }

    #[test]
    fn single_passing_candidate_needs_one_evaluation() {
        let outcome = select_from_scores(
            &[0.4],
            |_| Ok(0.0),
            &SelectionConfig::default(),
        )
        .unwrap();
        assert_eq!(outcome.selected_index, 0);
        assert_eq!(outcome.spatial_evaluations, 1);
    }

    #[test]
    fn fallback_best_spatial_flags_report() {
        let spatial = [3.0, 1.0, 2.0];
        let outcome = select_from_scores(
            &[0.1, 0.2, 0.3],
            |i| Ok(spatial[i]),
            &SelectionConfig {
                epsilon: 0.5,
                max_evaluated: None,
                fallback: Fallback::BestSpatial,
            },
        )
        .unwrap();
        assert!(outcome.fallback_used);
        assert_eq!(outcome.selected_index, 1);
        assert_eq!(outcome.spatial_evaluations, 3);
        assert!(outcome.scored.iter().all(|s| !s.accepted));
    }

    #[test]
    fn fallback_error_lists_scores() {
        let err = select_from_scores(
            &[0.1, 0.2],
            |i| Ok(1.0 + i as f64),
            &SelectionConfig {
                epsilon: 0.5,
                max_evaluated: None,
                fallback: Fallback::Error,
            },
        )
        .unwrap_err();
        let text = err.to_string();
        assert!(text.contains("#0"), "{text}");
        assert!(text.contains("#1"), "{text}");
    }

    #[test]
    fn eval_errors_reject_candidate_and_scan_continues() {
        let outcome = select_from_scores(
            &[0.1, 0.2],
            |i| {
                if i == 0 {
                    Err("lift failed".to_string())
                } else {
                    Ok(0.0)
                }
            },
            &SelectionConfig::default(),
        )
        .unwrap();
        assert_eq!(outcome.selected_index, 1);
        assert_eq!(outcome.spatial_evaluations, 2);
        assert!(outcome.scored[0].eval_error.is_some());
    }

    #[test]
    fn selection_filters_misplaced_rollout_end_to_end() {
        use crate::rollout::HallucinationMode;
        let build = build_task(TaskTemplate::Stack);
        let noise = NoiseSpec::defaults();
        let bad = generate_rollout(
            &build.scene,
            TaskTemplate::Stack,
            &HallucinationSpec {
                mode: HallucinationMode::Misplacement,
                magnitude: 0.10,
                onset_frac: 0.25,
                seed: 31,
            },
            &noise,
            16,
        )
        .unwrap();
        let good = generate_rollout(
            &build.scene,
            TaskTemplate::Stack,
            &HallucinationSpec::none(32),
            &noise,
            16,
        )
        .unwrap();
        let cs = build.constraints.clone().bind(&build.scene).unwrap();
        let wm = ToyWorldModel::with_defaults(1);
        let (outcome, _) = select(
            &[bad.rollout, good.rollout],
            &build.scene,
            &cs,
            &wm,
            &SelectionConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(outcome.selected_index, 1);
        assert!(!outcome.fallback_used);
    }

    #[test]
    fn track_noise_lift_error_is_bounded() {
        // σ = 1 px at ~0.8–1.1 m depth and fx = 300 is ~3–4 mm per axis;
        // RMS over all keypoints and frames stays well under 1 cm.
        let build = build_task(TaskTemplate::Stack);
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let noise = NoiseSpec {
                track_sigma_px: 1.0,
                depth_alpha_true: 1.0,
                depth_beta_true: 0.0,
                depth_sigma: 0.0,
            };
            let gen = generate_rollout(
                &build.scene,
                TaskTemplate::Stack,
                &HallucinationSpec::none(seed),
                &noise,
                16,
            )
            .unwrap();
            let lift = lift_to_3d(&gen.rollout, &build.scene, None).unwrap();
            let mut sq = 0.0;
            let mut n = 0usize;
            for t in 0..16 {
                for (a, b) in lift
                    .trajectory
                    .frame(t)
                    .points()
                    .iter()
                    .zip(gen.gt_keypoints.frame(t).points())
                {
                    sq += (a - b).norm_squared();
                    n += 1;
                }
            }
            worst = worst.max((sq / n as f64).sqrt());
        }
        assert!(worst < 0.01, "rms {worst}");
    }
}
