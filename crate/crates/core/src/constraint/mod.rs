//! Compositional constraint sets and the aggregate violation cost.
//!
//! The cost of a keypoint trajectory is the sum over constraints and
//! in-window timesteps of the squared hinge `max(0, c(k_t))²`. With the
//! default window `[0, 1]` every constraint is summed over every timestep.

mod expr;
mod parse;

pub use expr::{Axis, ConstraintExpr, EvalError, ScalarExpr, VecExpr};
pub use parse::{parse, ParseError};

use nalgebra::Vector3;
use thiserror::Error;

use crate::tensorio::SceneDoc;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("duplicate constraint name `{0}`")]
    DuplicateName(String),
    #[error("constraint `{name}` window [{t0}, {t1}] is invalid (need 0 ≤ t0 ≤ t1 ≤ 1)")]
    BadWindow { name: String, t0: f64, t1: f64 },
    #[error("constraint `{name}` references keypoint {index}, scene has K = {k}")]
    IndexOutOfRange {
        name: String,
        index: usize,
        k: usize,
    },
    #[error("constraint `{name}` failed at timestep {timestep}: {source}")]
    Eval {
        name: String,
        timestep: usize,
        source: EvalError,
    },
    #[error("trajectory has K = {traj_k} keypoints, expected {expected}")]
    TrajectoryMismatch { traj_k: usize, expected: usize },
    #[error("keypoint configuration contains a non-finite value")]
    NonFiniteConfig,
    #[error("trajectory must contain at least one timestep")]
    EmptyTrajectory,
}

/// K×3 keypoint configuration, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointConfig {
    points: Vec<Vector3<f64>>,
}

impl KeypointConfig {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, ConstraintError> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(ConstraintError::NonFiniteConfig);
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        self.points[i]
    }
}

/// T×K×3 keypoint trajectory, T ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTrajectory {
    frames: Vec<KeypointConfig>,
}

impl KeypointTrajectory {
    pub fn new(frames: Vec<KeypointConfig>) -> Result<Self, ConstraintError> {
        if frames.is_empty() {
            return Err(ConstraintError::EmptyTrajectory);
        }
        let k = frames[0].len();
        for f in &frames {
            if f.len() != k {
                return Err(ConstraintError::TrajectoryMismatch {
                    traj_k: f.len(),
                    expected: k,
                });
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn keypoint_count(&self) -> usize {
        self.frames[0].len()
    }

    pub fn frame(&self, t: usize) -> &KeypointConfig {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[KeypointConfig] {
        &self.frames
    }
}

/// One named constraint with an active window in normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub expr: ConstraintExpr,
    /// `[t0, t1] ⊆ [0, 1]` fraction of the horizon; default `[0, 1]`.
    pub window: (f64, f64),
}

impl Constraint {
    pub fn full_window(name: impl Into<String>, expr: ConstraintExpr) -> Self {
        Self {
            name: name.into(),
            expr,
            window: (0.0, 1.0),
        }
    }

    /// 0-based timestep range (inclusive) covered by the window for a
    /// horizon of `t_len` frames; `None` when the window rounds to empty.
    ///
    /// The 1-based convention is t ∈ [⌈t0·(T−1)⌉+1, ⌊t1·(T−1)⌋+1].
    pub fn window_steps(&self, t_len: usize) -> Option<(usize, usize)> {
        let span = (t_len - 1) as f64;
        let first = (self.window.0 * span).ceil() as usize;
        let last = (self.window.1 * span).floor() as usize;
        (first <= last).then_some((first, last))
    }
}

/// An ordered set of constraints with unique names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Result<Self, ConstraintError> {
        let mut seen = std::collections::HashSet::new();
        for c in &constraints {
            if !seen.insert(c.name.clone()) {
                return Err(ConstraintError::DuplicateName(c.name.clone()));
            }
            let (t0, t1) = c.window;
            if !(0.0..=1.0).contains(&t0) || !(0.0..=1.0).contains(&t1) || t0 > t1 {
                return Err(ConstraintError::BadWindow {
                    name: c.name.clone(),
                    t0,
                    t1,
                });
            }
        }
        Ok(Self { constraints })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Largest keypoint index referenced by any constraint.
    pub fn max_kp_index(&self) -> Option<usize> {
        self.constraints
            .iter()
            .filter_map(|c| c.expr.max_kp_index())
            .max()
    }

    /// Whether any constraint reads previous-timestep keypoints.
    pub fn uses_prev(&self) -> bool {
        self.constraints.iter().any(|c| c.expr.uses_prev())
    }

    /// Validates all keypoint references against a keypoint count.
    pub fn bind_to_count(self, k: usize) -> Result<BoundConstraintSet, ConstraintError> {
        for c in &self.constraints {
            if let Some(max) = c.expr.max_kp_index() {
                if max >= k {
                    return Err(ConstraintError::IndexOutOfRange {
                        name: c.name.clone(),
                        index: max,
                        k,
                    });
                }
            }
        }
        Ok(BoundConstraintSet { set: self, k })
    }

    /// Validates against a scene's global keypoint indexing (entities
    /// concatenated in file order).
    pub fn bind(self, scene: &SceneDoc) -> Result<BoundConstraintSet, ConstraintError> {
        self.bind_to_count(scene.total_keypoints())
    }
}

/// A constraint set whose keypoint references are known valid for K points.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstraintSet {
    set: ConstraintSet,
    k: usize,
}

impl BoundConstraintSet {
    pub fn set(&self) -> &ConstraintSet {
        &self.set
    }

    pub fn keypoint_count(&self) -> usize {
        self.k
    }
}

impl std::ops::Deref for BoundConstraintSet {
    type Target = ConstraintSet;

    fn deref(&self) -> &ConstraintSet {
        &self.set
    }
}

/// Evaluates one constraint at one timestep of a trajectory, with the
/// previous-frame convention (previous = current at the first frame).
pub fn eval_at(
    c: &Constraint,
    traj: &KeypointTrajectory,
    t: usize,
) -> Result<f64, ConstraintError> {
    let cur = traj.frame(t).points();
    let prev = traj.frame(t.saturating_sub(1)).points();
    c.expr.eval(cur, prev).map_err(|source| ConstraintError::Eval {
        name: c.name.clone(),
        timestep: t + 1,
        source,
    })
}

/// Aggregate violation: Σ over constraints and in-window timesteps of
/// `max(0, c(k_t))²`.
pub fn aggregate_cost(cs: &ConstraintSet, traj: &KeypointTrajectory) -> Result<f64, ConstraintError> {
    let mut total = 0.0;
    for c in cs.constraints() {
        let Some((first, last)) = c.window_steps(traj.len()) else {
            continue;
        };
        for t in first..=last {
            let v = eval_at(c, traj, t)?;
            let hinge = v.max(0.0);
            total += hinge * hinge;
        }
    }
    Ok(total)
}

/// Largest single-timestep hinge violation over the trajectory.
pub fn max_violation(cs: &ConstraintSet, traj: &KeypointTrajectory) -> Result<f64, ConstraintError> {
    let mut worst: f64 = 0.0;
    for c in cs.constraints() {
        let Some((first, last)) = c.window_steps(traj.len()) else {
            continue;
        };
        for t in first..=last {
            worst = worst.max(eval_at(c, traj, t)?.max(0.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_config(v: f64, k: usize) -> KeypointConfig {
        KeypointConfig::new(vec![Vector3::new(v, v, v); k]).unwrap()
    }

    fn constant_traj(v: f64, k: usize, t: usize) -> KeypointTrajectory {
        KeypointTrajectory::new(vec![constant_config(v, k); t]).unwrap()
    }

    #[test]
    fn satisfied_constraint_costs_zero() {
        // x(k0) − 1 with all coordinates 0: value −1 everywhere.
        let c = Constraint::full_window("below", parse("(sub (x (kp 0)) 1)").unwrap());
        let cs = ConstraintSet::new(vec![c]).unwrap();
        let traj = constant_traj(0.0, 2, 5);
        assert_eq!(aggregate_cost(&cs, &traj).unwrap(), 0.0);
    }

    #[test]
    fn constant_violation_direct_substitution() {
        // Constantly 2 over T = 3 and full window: 3 · 2² = 12.
        let c = Constraint::full_window("two", parse("2.0").unwrap());
        let cs = ConstraintSet::new(vec![c]).unwrap();
        let traj = constant_traj(0.0, 1, 3);
        assert_eq!(aggregate_cost(&cs, &traj).unwrap(), 12.0);
    }

    #[test]
    fn window_restricts_timesteps() {
        // T = 5, window [0.5, 1] → 1-based t ∈ [⌈2⌉+1, 5] = {3, 4, 5}.
        let c = Constraint {
            name: "goal".into(),
            expr: parse("1.0").unwrap(),
            window: (0.5, 1.0),
        };
        let cs = ConstraintSet::new(vec![c]).unwrap();
        let traj = constant_traj(0.0, 1, 5);
        assert_eq!(aggregate_cost(&cs, &traj).unwrap(), 3.0);
    }

    #[test]
    fn empty_window_contributes_nothing() {
        let c = Constraint {
            name: "point".into(),
            expr: parse("1.0").unwrap(),
            window: (0.3, 0.3),
        };
        let cs = ConstraintSet::new(vec![c]).unwrap();
        assert_eq!(aggregate_cost(&cs, &constant_traj(0.0, 1, 2)).unwrap(), 0.0);
        // T = 11: 0.3·10 = 3 is integral, so exactly one step participates.
        assert_eq!(aggregate_cost(&cs, &constant_traj(0.0, 1, 11)).unwrap(), 1.0);
    }

    #[test]
    fn empty_set_costs_zero() {
        let cs = ConstraintSet::empty();
        assert_eq!(aggregate_cost(&cs, &constant_traj(3.0, 4, 7)).unwrap(), 0.0);
    }

    #[test]
    fn bind_checks_index_range() {
        let c = Constraint::full_window("reach", parse("(x (kp 6))").unwrap());
        let cs = ConstraintSet::new(vec![c]).unwrap();
        let err = cs.clone().bind_to_count(6).unwrap_err();
        match err {
            ConstraintError::IndexOutOfRange { name, index, k } => {
                assert_eq!(name, "reach");
                assert_eq!(index, 6);
                assert_eq!(k, 6);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(cs.bind_to_count(7).is_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let a = Constraint::full_window("same", parse("1.0").unwrap());
        let b = Constraint::full_window("same", parse("2.0").unwrap());
        assert!(matches!(
            ConstraintSet::new(vec![a, b]),
            Err(ConstraintError::DuplicateName(_))
        ));
    }

    #[test]
    fn eval_error_carries_name_and_timestep() {
        let c = Constraint::full_window("div", parse("(div 1 (x (kp 0)))").unwrap());
        let cs = ConstraintSet::new(vec![c]).unwrap();
        let traj = constant_traj(0.0, 1, 3);
        match aggregate_cost(&cs, &traj) {
            Err(ConstraintError::Eval { name, timestep, .. }) => {
                assert_eq!(name, "div");
                assert_eq!(timestep, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kpprev_uses_previous_frame_convention() {
        // Speed limit: ‖k_t − k_{t−1}‖ − 0.5; first frame compares to itself.
        let c = Constraint::full_window(
            "speed",
            parse("(sub (norm (vsub (kp 0) (kpprev 0))) 0.5)").unwrap(),
        );
        let cs = ConstraintSet::new(vec![c]).unwrap();
        let frames = vec![
            constant_config(0.0, 1),
            constant_config(1.0, 1), // jump of √3 ≈ 1.732 → violation 1.232…
            constant_config(1.0, 1),
        ];
        let traj = KeypointTrajectory::new(frames).unwrap();
        let expected = (3f64.sqrt() - 0.5).powi(2);
        assert!((aggregate_cost(&cs, &traj).unwrap() - expected).abs() < 1e-12);
    }
}
