//! Episode runner and ablation harness.
//!
//! An episode runs one variant of the pipeline on one task archetype with
//! a derived seed: generate a rollout batch with seeded corruption, select,
//! retarget, optionally optimize, then judge success purely from the final
//! trajectory and the constraint set. The ablation harness runs seeded
//! episode grids per variant and archetype and tabulates success rates with
//! Wilson 95% intervals.
//!
//! Per-stage wall times are logged, never serialized: report files must be
//! byte-identical across reruns.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::{aggregate_cost, eval_at, ConstraintSet};
use crate::geometry::Pose;
use crate::optimize::{solve, OptProblem, SolverParams, DEFAULT_LAMBDA};
use crate::retarget::{induced_trajectory, retarget};
use crate::rollout::{
    generate_rollout, GeneratedRollout, HallucinationMode, HallucinationSpec, NoiseSpec,
    TaskTemplate, ToyWorldModel,
};
use crate::seeding;
use crate::selection::{select, Fallback, SelectionConfig};
use crate::tasks::{build_task, TaskBuild};
use crate::tensorio::{ReportDoc, RolloutRecord, SceneDoc};
use rand::Rng;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Relative draw weights of the four corruption modes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeMix {
    pub deformation: f64,
    pub disappearance: f64,
    pub misplacement: f64,
    pub wrong_object: f64,
}

impl Default for ModeMix {
    fn default() -> Self {
        Self {
            deformation: 1.0,
            disappearance: 1.0,
            misplacement: 1.0,
            wrong_object: 1.0,
        }
    }
}

impl ModeMix {
    fn draw(&self, rng: &mut impl Rng) -> HallucinationMode {
        let weights = [
            (HallucinationMode::Deformation, self.deformation),
            (HallucinationMode::Disappearance, self.disappearance),
            (HallucinationMode::Misplacement, self.misplacement),
            (HallucinationMode::WrongObject, self.wrong_object),
        ];
        let total: f64 = weights.iter().map(|(_, w)| w.max(0.0)).sum();
        if total <= 0.0 {
            return HallucinationMode::None;
        }
        let mut x = rng.random_range(0.0..total);
        for (mode, w) in weights {
            let w = w.max(0.0);
            if x < w {
                return mode;
            }
            x -= w;
        }
        HallucinationMode::WrongObject
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    pub epsilon: f64,
    pub max_evaluated: Option<usize>,
    /// "best_spatial" or "error".
    pub fallback: FallbackSetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackSetting {
    BestSpatial,
    Error,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            max_evaluated: None,
            fallback: FallbackSetting::BestSpatial,
        }
    }
}

impl SelectionSettings {
    pub fn to_config(self) -> SelectionConfig {
        SelectionConfig {
            epsilon: self.epsilon,
            max_evaluated: self.max_evaluated,
            fallback: match self.fallback {
                FallbackSetting::BestSpatial => Fallback::BestSpatial,
                FallbackSetting::Error => Fallback::Error,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub lambda: f64,
    pub rot_weight: f64,
    pub max_iters: usize,
    pub grad_step: f64,
    pub tol_obj: f64,
    pub tol_violation: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let p = SolverParams::default();
        Self {
            lambda: DEFAULT_LAMBDA,
            rot_weight: 1.0,
            max_iters: p.max_iters,
            grad_step: p.grad_step,
            tol_obj: p.tol_obj,
            tol_violation: p.tol_violation,
        }
    }
}

impl SolverSettings {
    pub fn params(&self) -> SolverParams {
        SolverParams {
            max_iters: self.max_iters,
            grad_step: self.grad_step,
            tol_obj: self.tol_obj,
            tol_violation: self.tol_violation,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldModelSettings {
    pub latent_dim: usize,
    pub context: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WorldModelSettings {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            context: 4,
            horizon: 2,
            stride: 1,
        }
    }
}

/// Full run configuration; every field has a default so config files can be
/// sparse, and CLI flags override file values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Scene JSON path; empty means the built-in scene for `task_template`.
    pub scene: Option<String>,
    /// Constraint JSON path; empty means the built-in set.
    pub constraints: Option<String>,
    pub task_template: String,
    pub n_rollouts: usize,
    pub frames: usize,
    pub hallucination_rate: f64,
    pub mode_mix: ModeMix,
    pub onset_frac: f64,
    pub deformation_magnitude: f64,
    pub misplacement_magnitude: f64,
    pub noise: NoiseSpec,
    pub selection: SelectionSettings,
    pub solver: SolverSettings,
    pub world_model: WorldModelSettings,
    pub success_threshold: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: None,
            constraints: None,
            task_template: "stack".to_string(),
            n_rollouts: 8,
            frames: 16,
            hallucination_rate: 0.5,
            mode_mix: ModeMix::default(),
            onset_frac: 0.25,
            deformation_magnitude: 0.04,
            misplacement_magnitude: 0.12,
            noise: NoiseSpec::defaults(),
            selection: SelectionSettings::default(),
            solver: SolverSettings::default(),
            world_model: WorldModelSettings::default(),
            success_threshold: 1e-3,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn template(&self) -> Result<TaskTemplate, crate::rollout::GenerateError> {
        TaskTemplate::from_str(&self.task_template)
    }

    pub fn world_model_for(&self, master_seed: u64) -> ToyWorldModel {
        let wm = &self.world_model;
        ToyWorldModel::new(
            wm.latent_dim,
            wm.context,
            wm.horizon,
            wm.stride,
            seeding::derive_seed(master_seed, "world-model", 0),
        )
    }

    /// Hallucination spec for rollout `index` of an episode: Bernoulli at
    /// the configured rate, then the mode mix.
    pub fn draw_hallucination(&self, episode_seed: u64, index: u64) -> HallucinationSpec {
        let mut rng = seeding::rng_for(episode_seed, "halluc-draw", index);
        let seed = seeding::derive_seed(episode_seed, "rollout", index);
        if rng.random_range(0.0..1.0) >= self.hallucination_rate {
            return HallucinationSpec::none(seed);
        }
        let mode = self.mode_mix.draw(&mut rng);
        let magnitude = match mode {
            HallucinationMode::Deformation => self.deformation_magnitude,
            HallucinationMode::Misplacement => self.misplacement_magnitude,
            _ => 0.0,
        };
        HallucinationSpec {
            mode,
            magnitude,
            onset_frac: self.onset_frac,
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
// Success criterion
// ---------------------------------------------------------------------------

/// Judges an executed trajectory: the aggregate violation of the induced
/// keypoint trajectory must stay at or below the threshold, and every
/// constraint whose window reaches the final frame must individually hold
/// there (squared hinge within the same threshold). Pure function of the
/// trajectory and the constraint set.
pub fn episode_success(
    trajectory: &[Pose],
    scene: &SceneDoc,
    cs: &ConstraintSet,
    threshold: f64,
) -> Result<(bool, f64), crate::constraint::ConstraintError> {
    let induced = induced_trajectory(trajectory, scene);
    let total = aggregate_cost(cs, &induced)?;
    let mut ok = total <= threshold;
    if ok {
        let last = induced.len() - 1;
        for c in cs.constraints() {
            let reaches_end = c.window_steps(induced.len()).is_some_and(|(_, l)| l == last);
            if reaches_end {
                let v = eval_at(c, &induced, last)?;
                let hinge = v.max(0.0);
                if hinge * hinge > threshold {
                    ok = false;
                    break;
                }
            }
        }
    }
    Ok((ok, total))
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// Pipeline variant, matching the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No rollouts: optimize from a static initialization, λ = 0.
    ConstraintsOnly,
    /// Retarget the first sampled rollout and execute as-is.
    VideoOnly,
    /// Select, retarget, execute as-is.
    PlusSelection,
    /// Full pipeline: select, retarget, optimize.
    PlusOpt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::ConstraintsOnly,
        Variant::VideoOnly,
        Variant::PlusSelection,
        Variant::PlusOpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConstraintsOnly => "constraints_only",
            Variant::VideoOnly => "video_only",
            Variant::PlusSelection => "plus_selection",
            Variant::PlusOpt => "plus_opt",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constraints_only" => Ok(Variant::ConstraintsOnly),
            "video_only" => Ok(Variant::VideoOnly),
            "plus_selection" => Ok(Variant::PlusSelection),
            "plus_opt" => Ok(Variant::PlusOpt),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// Flat per-episode summary, serialized into ablation outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub variant: String,
    pub task: String,
    pub episode: u64,
    pub success: bool,
    pub final_violation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_mode: Option<String>,
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retarget_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_converged: Option<bool>,
    #[serde(default)]
    pub spatial_evaluations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_category: Option<String>,
}

/// Per-stage wall time, seconds. Logged, never serialized.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub generate: f64,
    pub select: f64,
    pub retarget: f64,
    pub optimize: f64,
}

/// Full episode output.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub record: EpisodeRecord,
    pub report: ReportDoc,
    pub timings: StageTimings,
}

/// Failure taxonomy thresholds.
const CALIBRATION_ALPHA_REL_TOL: f64 = 0.05;
const CALIBRATION_BETA_ABS_TOL: f64 = 0.05;
const RETARGET_RESIDUAL_TOL: f64 = 0.005;

fn categorize_failure(record: &EpisodeRecord, noise: &NoiseSpec) -> String {
    if record
        .selected_mode
        .as_deref()
        .is_some_and(|m| m != "none")
    {
        return "selection_miss".to_string();
    }
    if let (Some(alpha), Some(beta)) = (record.calibration_alpha, record.calibration_beta) {
        let alpha_err = (alpha - noise.depth_alpha_true).abs() / noise.depth_alpha_true.max(1e-9);
        let beta_err = (beta - noise.depth_beta_true).abs();
        if alpha_err > CALIBRATION_ALPHA_REL_TOL || beta_err > CALIBRATION_BETA_ABS_TOL {
            return "calibration_error".to_string();
        }
    }
    if record
        .max_retarget_residual
        .is_some_and(|r| r > RETARGET_RESIDUAL_TOL)
    {
        return "retarget_residual".to_string();
    }
    if record.optimizer_converged == Some(false) {
        return "optimizer_nonconverged".to_string();
    }
    "other".to_string()
}

/// Runs one episode of `variant` on a built task. Infallible: every stage
/// error is folded into a failed outcome with the error recorded.
pub fn run_episode(
    build: &TaskBuild,
    cfg: &RunConfig,
    variant: Variant,
    episode: u64,
) -> EpisodeOutcome {
    let episode_seed = seeding::derive_seed(
        cfg.seed,
        &format!("episode/{}/{}", variant.name(), build.template.name()),
        episode,
    );
    let mut record = EpisodeRecord {
        variant: variant.name().to_string(),
        task: build.template.name().to_string(),
        episode,
        success: false,
        final_violation: f64::NAN,
        selected_index: None,
        selected_mode: None,
        fallback: false,
        calibration_alpha: None,
        calibration_beta: None,
        max_retarget_residual: None,
        optimizer_converged: None,
        spatial_evaluations: 0,
        error: None,
        failure_category: None,
    };
    let mut report = ReportDoc::default();
    let mut timings = StageTimings::default();

    let outcome = run_episode_inner(build, cfg, variant, episode_seed, &mut record, &mut report, &mut timings);
    if let Err(message) = outcome {
        record.error = Some(message);
        record.success = false;
    }
    if !record.success {
        record.failure_category = Some(categorize_failure(&record, &cfg.noise));
    }
    log::debug!(
        "episode {}/{}/{}: success={} gen={:.3}s select={:.3}s retarget={:.3}s optimize={:.3}s",
        record.variant,
        record.task,
        episode,
        record.success,
        timings.generate,
        timings.select,
        timings.retarget,
        timings.optimize
    );
    EpisodeOutcome {
        record,
        report,
        timings,
    }
}

fn run_episode_inner(
    build: &TaskBuild,
    cfg: &RunConfig,
    variant: Variant,
    episode_seed: u64,
    record: &mut EpisodeRecord,
    report: &mut ReportDoc,
    timings: &mut StageTimings,
) -> Result<(), String> {
    let scene = &build.scene;
    let bound = build
        .constraints
        .clone()
        .bind(scene)
        .map_err(|e| e.to_string())?;

    if variant == Variant::ConstraintsOnly {
        // No video prior: a static initialization at the grasp pose and a
        // pure constraint objective.
        let start = Instant::now();
        let init = vec![scene.grasp_transform; cfg.frames];
        let mut prob = OptProblem::new(init, bound.clone(), scene.clone(), 0.0);
        prob.rot_weight = cfg.solver.rot_weight;
        prob.params = cfg.solver.params();
        let solved = solve(&prob).map_err(|e| e.to_string())?;
        timings.optimize = start.elapsed().as_secs_f64();
        record.optimizer_converged = Some(solved.converged);
        report.trace = solved.trace;
        report.final_trajectory = solved.trajectory.clone();
        let (success, violation) =
            episode_success(&solved.trajectory, scene, &build.constraints, cfg.success_threshold)
                .map_err(|e| e.to_string())?;
        record.success = success;
        record.final_violation = violation;
        return Ok(());
    }

    // Generate the candidate batch.
    let start = Instant::now();
    let template = build.template;
    let batch: Vec<GeneratedRollout> = (0..cfg.n_rollouts as u64)
        .map(|i| {
            let spec = cfg.draw_hallucination(episode_seed, i);
            generate_rollout(scene, template, &spec, &cfg.noise, cfg.frames)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    timings.generate = start.elapsed().as_secs_f64();
    let rollouts: Vec<_> = batch.iter().map(|g| g.rollout.clone()).collect();

    // Selection (or the blind first pick for video_only).
    let start = Instant::now();
    let (selected_index, lift) = match variant {
        Variant::VideoOnly => {
            let lift = crate::selection::lift_to_3d(&rollouts[0], scene, None)
                .map_err(|e| e.to_string())?;
            record.selected_index = Some(0);
            (0, lift)
        }
        _ => {
            let wm = cfg.world_model_for(cfg.seed);
            let (outcome, lift) = select(
                &rollouts,
                scene,
                &bound,
                &wm,
                &cfg.selection.to_config(),
                None,
            )
            .map_err(|e| e.to_string())?;
            record.selected_index = Some(outcome.selected_index);
            record.fallback = outcome.fallback_used;
            record.spatial_evaluations = outcome.spatial_evaluations;
            report.rollouts = outcome
                .scored
                .iter()
                .map(|s| RolloutRecord {
                    index: s.index,
                    s_vis: s.s_vis,
                    s_spatial: s.s_spatial,
                    accepted: s.accepted,
                    eval_error: s.eval_error.clone(),
                })
                .collect();
            report.selected_index = Some(outcome.selected_index);
            report.fallback = outcome.fallback_used;
            (outcome.selected_index, lift)
        }
    };
    timings.select = start.elapsed().as_secs_f64();
    record.selected_mode = Some(rollouts[selected_index].meta.injected_mode.name().to_string());
    record.calibration_alpha = Some(lift.calibration.alpha);
    record.calibration_beta = Some(lift.calibration.beta);

    // Retarget.
    let start = Instant::now();
    let retargeted = retarget(
        &lift.trajectory,
        Some(&rollouts[selected_index].visibility),
        scene,
    )
    .map_err(|e| e.to_string())?;
    timings.retarget = start.elapsed().as_secs_f64();
    record.max_retarget_residual = Some(retargeted.max_residual());

    // Optimize (full pipeline only).
    let final_trajectory = if variant == Variant::PlusOpt {
        let start = Instant::now();
        let mut prob = OptProblem::new(
            retargeted.initial_trajectory.clone(),
            bound.clone(),
            scene.clone(),
            cfg.solver.lambda,
        );
        prob.rot_weight = cfg.solver.rot_weight;
        prob.params = cfg.solver.params();
        let solved = solve(&prob).map_err(|e| e.to_string())?;
        timings.optimize = start.elapsed().as_secs_f64();
        record.optimizer_converged = Some(solved.converged);
        report.trace = solved.trace;
        solved.trajectory
    } else {
        retargeted.initial_trajectory.clone()
    };
    report.final_trajectory = final_trajectory.clone();

    let (success, violation) =
        episode_success(&final_trajectory, scene, &build.constraints, cfg.success_threshold)
            .map_err(|e| e.to_string())?;
    record.success = success;
    record.final_violation = violation;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// One (variant, task) cell of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub task: String,
    pub successes: usize,
    pub episodes: usize,
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Full ablation output: the success table plus every episode record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub episodes: usize,
    pub cells: Vec<AblationCell>,
    pub records: Vec<EpisodeRecord>,
}

impl AblationTable {
    pub fn rate(&self, variant: Variant, task: TaskTemplate) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant.name() && c.task == task.name())
            .map(|c| c.rate)
    }

    /// Mean success rate of a variant across tasks.
    pub fn mean_rate(&self, variant: Variant) -> f64 {
        let rates: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant.name())
            .map(|c| c.rate)
            .collect();
        rates.iter().sum::<f64>() / rates.len().max(1) as f64
    }

    /// Success-rate table as CSV: one row per (variant, task) plus a
    /// per-variant average row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,task,successes,episodes,rate,ci_lo,ci_hi\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.variant, c.task, c.successes, c.episodes, c.rate, c.ci_lo, c.ci_hi
            ));
        }
        let mut variants: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !variants.contains(&c.variant.as_str()) {
                variants.push(&c.variant);
            }
        }
        for v in variants {
            let rates: Vec<f64> = self
                .cells
                .iter()
                .filter(|c| c.variant == v)
                .map(|c| c.rate)
                .collect();
            let mean = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
            out.push_str(&format!("{v},average,,,{mean},,\n"));
        }
        out
    }
}

/// Wilson 95% score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054_f64;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Runs the ablation grid. Episodes are independent and run in parallel on
/// up to `jobs` threads; outputs are merged in (variant, task, episode)
/// order so the result is identical regardless of parallelism.
pub fn run_ablation(
    cfg: &RunConfig,
    variants: &[Variant],
    tasks: &[TaskTemplate],
    episodes: usize,
    jobs: usize,
) -> AblationTable {
    let builds: Vec<TaskBuild> = tasks.iter().map(|&t| build_task(t)).collect();

    let mut grid: Vec<(usize, usize, u64)> = Vec::new();
    for (vi, _) in variants.iter().enumerate() {
        for (ti, _) in tasks.iter().enumerate() {
            for e in 0..episodes as u64 {
                grid.push((vi, ti, e));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let records: Vec<EpisodeRecord> = pool.install(|| {
        grid.par_iter()
            .map(|&(vi, ti, e)| run_episode(&builds[ti], cfg, variants[vi], e).record)
            .collect()
    });

    let mut cells = Vec::new();
    for variant in variants {
        for task in tasks {
            let subset: Vec<&EpisodeRecord> = records
                .iter()
                .filter(|r| r.variant == variant.name() && r.task == task.name())
                .collect();
            let successes = subset.iter().filter(|r| r.success).count();
            let n = subset.len();
            let (ci_lo, ci_hi) = wilson_interval(successes, n);
            cells.push(AblationCell {
                variant: variant.name().to_string(),
                task: task.name().to_string(),
                successes,
                episodes: n,
                rate: successes as f64 / n.max(1) as f64,
                ci_lo,
                ci_hi,
            });
        }
    }
    AblationTable {
        seed: cfg.seed,
        episodes,
        cells,
        records,
    }
}

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

/// Aggregate over episode records: success counts, failure categories, and
/// score distributions, suitable for plotting.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ReportSummary {
    pub episodes: usize,
    pub successes: usize,
    pub failures: usize,
    /// (category, count, share of failures).
    pub failure_breakdown: Vec<(String, usize, f64)>,
}

pub fn summarize_records(records: &[EpisodeRecord]) -> ReportSummary {
    let episodes = records.len();
    let successes = records.iter().filter(|r| r.success).count();
    let failures = episodes - successes;
    let mut counts: Vec<(String, usize)> = Vec::new();
    for r in records.iter().filter(|r| !r.success) {
        let cat = r
            .failure_category
            .clone()
            .unwrap_or_else(|| "other".to_string());
        match counts.iter_mut().find(|(c, _)| *c == cat) {
            Some((_, n)) => *n += 1,
            None => counts.push((cat, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let failure_breakdown = counts
        .into_iter()
        .map(|(c, n)| {
            let share = n as f64 / failures.max(1) as f64;
            (c, n, share)
        })
        .collect();
    ReportSummary {
        episodes,
        successes,
        failures,
        failure_breakdown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_is_deterministic() {
        let build = build_task(TaskTemplate::Stack);
        let cfg = RunConfig {
            n_rollouts: 4,
            frames: 12,
            ..RunConfig::default()
        };
        let a = run_episode(&build, &cfg, Variant::PlusOpt, 3);
        let b = run_episode(&build, &cfg, Variant::PlusOpt, 3);
        assert_eq!(
            serde_json::to_string(&a.record).unwrap(),
            serde_json::to_string(&b.record).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
    }

    #[test]
    fn noiseless_plus_opt_succeeds() {
        let build = build_task(TaskTemplate::Stack);
        let cfg = RunConfig {
            n_rollouts: 2,
            frames: 12,
            hallucination_rate: 0.0,
            noise: NoiseSpec::noiseless(),
            ..RunConfig::default()
        };
        let out = run_episode(&build, &cfg, Variant::PlusOpt, 0);
        assert!(out.record.success, "{:?}", out.record);
        assert_eq!(out.record.selected_mode.as_deref(), Some("none"));
        assert!(out.record.final_violation <= 1e-9);
    }

    #[test]
    fn success_judgement_is_pure_and_strict() {
        let build = build_task(TaskTemplate::Stack);
        let gen = generate_rollout(
            &build.scene,
            TaskTemplate::Stack,
            &HallucinationSpec::none(7),
            &NoiseSpec::noiseless(),
            12,
        )
        .unwrap();
        let (ok, violation) = episode_success(
            &gen.plan.ee_poses,
            &build.scene,
            &build.constraints,
            1e-3,
        )
        .unwrap();
        assert!(ok);
        assert!(violation < 1e-12);

        let staying = vec![build.scene.grasp_transform; 12];
        let (ok, violation) =
            episode_success(&staying, &build.scene, &build.constraints, 1e-3).unwrap();
        assert!(!ok);
        assert!(violation > 1e-2);
    }

    #[test]
    fn wilson_interval_sanity() {
        let (lo, hi) = wilson_interval(0, 0);
        assert_eq!((lo, hi), (0.0, 1.0));
        let (lo, hi) = wilson_interval(50, 100);
        assert!(lo > 0.39 && lo < 0.5);
        assert!(hi > 0.5 && hi < 0.61);
        let (lo, hi) = wilson_interval(100, 100);
        assert!(lo > 0.95);
        assert!((hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn failure_categories_cover_all_failures() {
        let build = build_task(TaskTemplate::Stack);
        let cfg = RunConfig {
            n_rollouts: 4,
            frames: 12,
            hallucination_rate: 1.0,
            ..RunConfig::default()
        };
        let mut records = Vec::new();
        for e in 0..6 {
            records.push(run_episode(&build, &cfg, Variant::VideoOnly, e).record);
        }
        let summary = summarize_records(&records);
        assert_eq!(summary.episodes, 6);
        let share_sum: f64 = summary
            .failure_breakdown
            .iter()
            .map(|(_, _, s)| s)
            .sum();
        if summary.failures > 0 {
            assert!((share_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_ablation_is_deterministic_and_ordered() {
        let cfg = RunConfig {
            n_rollouts: 4,
            frames: 12,
            seed: 11,
            ..RunConfig::default()
        };
        let tasks = [TaskTemplate::Stack];
        let a = run_ablation(&cfg, &Variant::ALL, &tasks, 3, 2);
        let b = run_ablation(&cfg, &Variant::ALL, &tasks, 3, 1);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
