//! Constraint-based trajectory refinement.
//!
//! The objective is the aggregate squared-hinge violation of the keypoint
//! trajectory induced by the end-effector poses, plus a λ-weighted fidelity
//! term keeping the result near its initialization. Decision variables are
//! normalized to [0, 1]^{6T}: translations mapped affinely from the
//! workspace box, rotations as rotation vectors mapped from [−π, π]³.
//!
//! The solver is a projected spectral-gradient descent with Armijo
//! backtracking on the penalty objective; the squared hinge is C¹, so
//! central finite differences behave at the constraint boundary. When no
//! constraint reads previous-frame keypoints the objective is separable
//! across timesteps and partial re-evaluation makes the gradient O(T).

use nalgebra::Vector3;
use thiserror::Error;

use crate::constraint::{BoundConstraintSet, ConstraintError, KeypointConfig};
use crate::geometry::{self, Pose};
use crate::retarget::induced_config;
use crate::tensorio::{SceneDoc, TraceRow};

#[derive(Debug, Error)]
pub enum OptError {
    #[error("pose {timestep} coordinate {axis} is {value:.4}, more than 1% outside the box")]
    PoseOutOfBounds {
        timestep: usize,
        axis: usize,
        value: f64,
    },
    #[error("variable vector length {0} is not a multiple of 6")]
    BadVariableLength(usize),
    #[error("constraint evaluation: {0}")]
    Eval(#[from] ConstraintError),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("workspace box is degenerate on axis {0}")]
    DegenerateBox(usize),
}

/// Normalization box: workspace AABB for translations, [−π, π]³ for
/// rotation vectors.
#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub aabb: [[f64; 3]; 2],
}

impl Bounds {
    pub fn from_scene(scene: &SceneDoc) -> Self {
        Self {
            aabb: scene.workspace_aabb,
        }
    }

    fn validate(&self) -> Result<(), OptError> {
        for a in 0..3 {
            if !(self.aabb[1][a] - self.aabb[0][a]).is_finite()
                || self.aabb[1][a] <= self.aabb[0][a]
            {
                return Err(OptError::DegenerateBox(a));
            }
        }
        Ok(())
    }
}

const ROT_BOUND: f64 = std::f64::consts::PI;
/// Marginally out-of-box poses (retargeting noise) are clamped up to this
/// fraction of the box width; anything further is an error.
const CLAMP_SLACK: f64 = 0.01;

/// Default fidelity weight. The penalty optimum keeps a λ/(1+λ) fraction of
/// each active violation, so reducing violations below 10% of their
/// starting cost needs λ ≲ 0.46; 0.1 leaves ~1% while still anchoring the
/// trajectory to its initialization in feasible directions.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Per-iteration step cap (∞-norm, normalized coordinates). Keeps the
/// method local: descent cannot hop across penalty walls that a trust-sized
/// step would have to climb.
const MAX_STEP_NORM: f64 = 0.02;

/// Encodes poses into [0, 1]^{6T}. Values marginally outside the box are
/// clamped with a warning; beyond 1% of the box width is an error.
pub fn encode_variables(traj: &[Pose], bounds: &Bounds) -> Result<Vec<f64>, OptError> {
    if traj.is_empty() {
        return Err(OptError::EmptyTrajectory);
    }
    bounds.validate()?;
    let mut vars = Vec::with_capacity(traj.len() * 6);
    for (t, pose) in traj.iter().enumerate() {
        let p = pose.translation();
        for a in 0..3 {
            let u = (p[a] - bounds.aabb[0][a]) / (bounds.aabb[1][a] - bounds.aabb[0][a]);
            vars.push(clamp_unit(u, t, a)?);
        }
        let r = pose.rotation_vector();
        for a in 0..3 {
            let u = (r[a] + ROT_BOUND) / (2.0 * ROT_BOUND);
            vars.push(clamp_unit(u, t, 3 + a)?);
        }
    }
    Ok(vars)
}

fn clamp_unit(u: f64, timestep: usize, axis: usize) -> Result<f64, OptError> {
    if !(-CLAMP_SLACK..=1.0 + CLAMP_SLACK).contains(&u) {
        return Err(OptError::PoseOutOfBounds {
            timestep,
            axis,
            value: u,
        });
    }
    if !(0.0..=1.0).contains(&u) {
        log::warn!(
            "pose {timestep} axis {axis} marginally outside the box (u = {u:.4}); clamping"
        );
        return Ok(u.clamp(0.0, 1.0));
    }
    Ok(u)
}

/// Exact inverse of [`encode_variables`] on the box interior.
pub fn decode_variables(vars: &[f64], bounds: &Bounds) -> Result<Vec<Pose>, OptError> {
    if vars.is_empty() || vars.len() % 6 != 0 {
        return Err(OptError::BadVariableLength(vars.len()));
    }
    bounds.validate()?;
    Ok((0..vars.len() / 6)
        .map(|t| decode_block(&vars[6 * t..6 * t + 6], bounds))
        .collect())
}

fn decode_block(block: &[f64], bounds: &Bounds) -> Pose {
    let p = Vector3::new(
        bounds.aabb[0][0] + block[0] * (bounds.aabb[1][0] - bounds.aabb[0][0]),
        bounds.aabb[0][1] + block[1] * (bounds.aabb[1][1] - bounds.aabb[0][1]),
        bounds.aabb[0][2] + block[2] * (bounds.aabb[1][2] - bounds.aabb[0][2]),
    );
    let r = Vector3::new(
        block[3] * 2.0 * ROT_BOUND - ROT_BOUND,
        block[4] * 2.0 * ROT_BOUND - ROT_BOUND,
        block[5] * 2.0 * ROT_BOUND - ROT_BOUND,
    );
    Pose::from_rotvec_translation(r, p)
}

/// Solver knobs.
#[derive(Debug, Clone, Copy)]
pub struct SolverParams {
    pub max_iters: usize,
    /// Central-difference step in normalized coordinates.
    pub grad_step: f64,
    /// Stop when the absolute objective improvement falls below this.
    pub tol_obj: f64,
    /// With the projected gradient small, stop once the largest
    /// single-timestep hinge violation is below this.
    pub tol_violation: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_step: 1e-6,
            tol_obj: 1e-14,
            tol_violation: 1e-9,
        }
    }
}

/// One trajectory-refinement problem.
#[derive(Debug, Clone)]
pub struct OptProblem {
    pub initial_trajectory: Vec<Pose>,
    pub constraints: BoundConstraintSet,
    pub scene: SceneDoc,
    /// Fidelity weight λ.
    pub lambda: f64,
    /// Weight of squared rotation-vector distance against squared meters.
    pub rot_weight: f64,
    pub params: SolverParams,
}

impl OptProblem {
    pub fn new(
        initial_trajectory: Vec<Pose>,
        constraints: BoundConstraintSet,
        scene: SceneDoc,
        lambda: f64,
    ) -> Self {
        Self {
            initial_trajectory,
            constraints,
            scene,
            lambda,
            rot_weight: 1.0,
            params: SolverParams::default(),
        }
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::from_scene(&self.scene)
    }
}

/// Refinement output; the trace objective is non-increasing by construction.
#[derive(Debug, Clone)]
pub struct OptResult {
    pub trajectory: Vec<Pose>,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub iterations: usize,
}

/// Objective decomposition at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub constraint_term: f64,
    pub fidelity_term: f64,
    pub max_violation: f64,
}

struct Evaluator<'a> {
    prob: &'a OptProblem,
    bounds: Bounds,
    t_len: usize,
    /// Constraint indices active per timestep.
    active: Vec<Vec<usize>>,
    uses_prev: bool,
    /// Initial translations and canonical rotation vectors for fidelity.
    p0: Vec<Vector3<f64>>,
    r0: Vec<Vector3<f64>>,
}

impl<'a> Evaluator<'a> {
    fn new(prob: &'a OptProblem) -> Result<Self, OptError> {
        let t_len = prob.initial_trajectory.len();
        if t_len == 0 {
            return Err(OptError::EmptyTrajectory);
        }
        let bounds = prob.bounds();
        bounds.validate()?;
        let mut active = vec![Vec::new(); t_len];
        for (ci, c) in prob.constraints.constraints().iter().enumerate() {
            if let Some((first, last)) = c.window_steps(t_len) {
                for row in active.iter_mut().take(last + 1).skip(first) {
                    row.push(ci);
                }
            }
        }
        Ok(Self {
            prob,
            bounds,
            t_len,
            active,
            uses_prev: prob.constraints.uses_prev(),
            p0: prob.initial_trajectory.iter().map(Pose::translation).collect(),
            r0: prob
                .initial_trajectory
                .iter()
                .map(Pose::rotation_vector)
                .collect(),
        })
    }

    fn config_at(&self, block: &[f64]) -> KeypointConfig {
        let xi = decode_block(block, &self.bounds);
        let object_pose = geometry::compose(&xi, &geometry::invert(&self.prob.scene.grasp_transform));
        induced_config(&object_pose, &self.prob.scene)
    }

    fn configs(&self, vars: &[f64]) -> Vec<KeypointConfig> {
        (0..self.t_len)
            .map(|t| self.config_at(&vars[6 * t..6 * t + 6]))
            .collect()
    }

    /// Squared-hinge constraint term and max violation at timestep t.
    fn term_at(
        &self,
        t: usize,
        cur: &KeypointConfig,
        prev: &KeypointConfig,
    ) -> Result<(f64, f64), OptError> {
        let mut sum = 0.0;
        let mut worst: f64 = 0.0;
        for &ci in &self.active[t] {
            let c = &self.prob.constraints.constraints()[ci];
            let v = c
                .expr
                .eval(cur.points(), prev.points())
                .map_err(|source| ConstraintError::Eval {
                    name: c.name.clone(),
                    timestep: t + 1,
                    source,
                })?;
            let hinge = v.max(0.0);
            sum += hinge * hinge;
            worst = worst.max(hinge);
        }
        Ok((sum, worst))
    }

    fn fidelity_at(&self, t: usize, block: &[f64]) -> f64 {
        let xi = decode_block(block, &self.bounds);
        let dp = xi.translation() - self.p0[t];
        let r = Vector3::new(
            block[3] * 2.0 * ROT_BOUND - ROT_BOUND,
            block[4] * 2.0 * ROT_BOUND - ROT_BOUND,
            block[5] * 2.0 * ROT_BOUND - ROT_BOUND,
        );
        let dr = r - self.r0[t];
        dp.norm_squared() + self.prob.rot_weight * dr.norm_squared()
    }

    fn objective(&self, vars: &[f64]) -> Result<ObjectiveValue, OptError> {
        let configs = self.configs(vars);
        let mut constraint_term = 0.0;
        let mut fidelity_term = 0.0;
        let mut max_violation: f64 = 0.0;
        for t in 0..self.t_len {
            let prev = &configs[t.saturating_sub(1)];
            let (sum, worst) = self.term_at(t, &configs[t], prev)?;
            constraint_term += sum;
            max_violation = max_violation.max(worst);
            fidelity_term += self.fidelity_at(t, &vars[6 * t..6 * t + 6]);
        }
        Ok(ObjectiveValue {
            total: constraint_term + self.prob.lambda * fidelity_term,
            constraint_term,
            fidelity_term,
            max_violation,
        })
    }

    /// Constraint + λ·fidelity restricted to the terms that depend on the
    /// block of timestep t (term t, plus term t+1 when kpprev is in play).
    fn local_value(
        &self,
        t: usize,
        block: &[f64],
        configs: &[KeypointConfig],
    ) -> Result<f64, OptError> {
        let cur = self.config_at(block);
        let prev = if t == 0 { &cur } else { &configs[t - 1] };
        let (mut sum, _) = self.term_at(t, &cur, prev)?;
        if self.uses_prev && t + 1 < self.t_len {
            let (next, _) = self.term_at(t + 1, &configs[t + 1], &cur)?;
            sum += next;
        }
        Ok(sum + self.prob.lambda * self.fidelity_at(t, block))
    }

    /// Central-difference gradient, exploiting timestep separability.
    fn gradient(&self, vars: &[f64], configs: &[KeypointConfig]) -> Result<Vec<f64>, OptError> {
        let h = self.prob.params.grad_step;
        let mut grad = vec![0.0; vars.len()];
        let mut block = [0.0; 6];
        for t in 0..self.t_len {
            block.copy_from_slice(&vars[6 * t..6 * t + 6]);
            for a in 0..6 {
                let orig = block[a];
                block[a] = orig + h;
                let plus = self.local_value(t, &block, configs)?;
                block[a] = orig - h;
                let minus = self.local_value(t, &block, configs)?;
                block[a] = orig;
                grad[6 * t + a] = (plus - minus) / (2.0 * h);
            }
        }
        Ok(grad)
    }
}

/// Objective at a normalized variable vector.
pub fn objective(vars: &[f64], prob: &OptProblem) -> Result<ObjectiveValue, OptError> {
    if vars.len() != prob.initial_trajectory.len() * 6 {
        return Err(OptError::BadVariableLength(vars.len()));
    }
    Evaluator::new(prob)?.objective(vars)
}

/// Central-difference gradient of [`objective`].
pub fn objective_gradient(vars: &[f64], prob: &OptProblem) -> Result<Vec<f64>, OptError> {
    if vars.len() != prob.initial_trajectory.len() * 6 {
        return Err(OptError::BadVariableLength(vars.len()));
    }
    let eval = Evaluator::new(prob)?;
    let configs = eval.configs(vars);
    eval.gradient(vars, &configs)
}

fn clamp01(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Minimizes the penalty objective from the retargeted initialization.
///
/// Projected spectral (Barzilai–Borwein seeded) gradient descent with
/// monotone Armijo backtracking. Returns the best iterate found; the trace
/// records every accepted step.
pub fn solve(prob: &OptProblem) -> Result<OptResult, OptError> {
    let eval = Evaluator::new(prob)?;
    let bounds = prob.bounds();
    let mut x = encode_variables(&prob.initial_trajectory, &bounds)?;

    let value0 = eval.objective(&x)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        objective: value0.total,
        constraint_term: value0.constraint_term,
        fidelity_term: value0.fidelity_term,
        max_violation: value0.max_violation,
    }];

    // Feasible initialization is a fixed point: both terms vanish and the
    // exact input is returned.
    if value0.constraint_term == 0.0 {
        return Ok(OptResult {
            trajectory: prob.initial_trajectory.clone(),
            trace,
            converged: true,
            iterations: 0,
        });
    }

    let params = prob.params;
    let grad_tol = params.tol_obj.max(1e-30).sqrt();
    let mut value = value0;
    let mut prev_x: Option<Vec<f64>> = None;
    let mut prev_grad: Option<Vec<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=params.max_iters {
        let configs = eval.configs(&x);
        let grad = eval.gradient(&x, &configs)?;

        // Projected-gradient stationarity.
        let mut probe = x.clone();
        for (p, g) in probe.iter_mut().zip(&grad) {
            *p -= g;
        }
        clamp01(&mut probe);
        let proj_norm = probe
            .iter()
            .zip(&x)
            .fold(0.0f64, |m, (p, xv)| m.max((p - xv).abs()));
        if proj_norm < grad_tol {
            converged = true;
            break;
        }

        // Spectral step length from the previous pair, else a conservative
        // first step; capped so one iteration moves at most MAX_STEP_NORM.
        let mut step = match (&prev_x, &prev_grad) {
            (Some(px), Some(pg)) => {
                let mut ss = 0.0;
                let mut sy = 0.0;
                for i in 0..x.len() {
                    let s = x[i] - px[i];
                    let y = grad[i] - pg[i];
                    ss += s * s;
                    sy += s * y;
                }
                if sy > 1e-30 {
                    (ss / sy).clamp(1e-10, 1e4)
                } else {
                    1.0
                }
            }
            _ => (0.1 / inf_norm(&grad).max(1e-12)).min(1.0),
        };
        step = step.min(MAX_STEP_NORM / inf_norm(&grad).max(1e-12));

        // Monotone Armijo backtracking with box projection.
        let mut accepted = None;
        for _ in 0..40 {
            let mut candidate = x.clone();
            for (c, g) in candidate.iter_mut().zip(&grad) {
                *c -= step * g;
            }
            clamp01(&mut candidate);
            let decrease: f64 = grad
                .iter()
                .zip(candidate.iter().zip(&x))
                .map(|(g, (c, xv))| g * (c - xv))
                .sum();
            if decrease >= 0.0 {
                step *= 0.5;
                continue;
            }
            let cand_value = eval.objective(&candidate)?;
            if cand_value.total <= value.total + 1e-4 * decrease {
                accepted = Some((candidate, cand_value));
                break;
            }
            step *= 0.5;
        }

        let Some((new_x, new_value)) = accepted else {
            // Line search exhausted its retry budget; best-so-far is x.
            converged = false;
            break;
        };

        prev_x = Some(std::mem::replace(&mut x, new_x));
        prev_grad = Some(grad);
        let improvement = value.total - new_value.total;
        value = new_value;
        iterations = iter;
        trace.push(TraceRow {
            iteration: iter,
            objective: value.total,
            constraint_term: value.constraint_term,
            fidelity_term: value.fidelity_term,
            max_violation: value.max_violation,
        });

        if improvement < params.tol_obj {
            converged = true;
            break;
        }
        if value.max_violation <= params.tol_violation && proj_norm <= grad_tol.max(1e-7) {
            converged = true;
            break;
        }
    }

    if iterations == params.max_iters {
        // Ran the full budget without meeting a tolerance.
        converged = false;
    }

    Ok(OptResult {
        trajectory: decode_variables(&x, &bounds)?,
        trace,
        converged,
        iterations,
    })
}
