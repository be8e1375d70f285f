//! The six shipped task archetypes: procedural scenes plus their constraint
//! sets.
//!
//! Every scene lives on a tilted support plane observed by a fixed pinhole
//! camera, so keypoint depths vary across the workspace and the depth
//! calibration stays well-conditioned. Objects are rectangular slabs resting
//! on the plane; the scene depth map and entity masks are rendered by ray
//! casting against slab top faces, and entity keypoints are sampled from the
//! masks (axis extrema plus one interior point) and back-projected through
//! the rendered depth, so keypoints, masks, and depth are exactly
//! consistent.
//!
//! Constraints are authored as expression trees against measured nominal
//! geometry, then serialized to the shipped JSON files.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::constraint::{Constraint, ConstraintSet, ScalarExpr, VecExpr};
use crate::geometry::{back_project, sample_keypoints, Intrinsics, Pose};
use crate::rollout::TaskTemplate;
use crate::seeding;
use crate::tensorio::{Entity, SceneDoc, Tensor};

/// Support-plane normal in the camera frame (unit, points away from camera).
pub const PLANE_NORMAL: [f64; 3] = [0.0, 0.6, 0.8];
/// Plane offset: points p on the support satisfy dot(p, n) = PLANE_OFFSET.
pub const PLANE_OFFSET: f64 = 0.8;

const CAMERA: Intrinsics = Intrinsics {
    fx: 300.0,
    fy: 300.0,
    cx: 160.0,
    cy: 120.0,
    width: 320,
    height: 240,
};

fn normal() -> Vector3<f64> {
    Vector3::new(PLANE_NORMAL[0], PLANE_NORMAL[1], PLANE_NORMAL[2])
}

/// "Up" direction: away from the support plane, toward the camera side.
fn up() -> Vector3<f64> {
    -normal()
}

/// In-plane axes: a along camera x, b completing the frame.
fn axis_a() -> Vector3<f64> {
    Vector3::new(1.0, 0.0, 0.0)
}

fn axis_b() -> Vector3<f64> {
    normal().cross(&axis_a())
}

/// Plane origin: the point straight ahead of the camera on the support.
fn plane_origin() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 1.0)
}

/// A rectangular slab resting on the support plane.
#[derive(Debug, Clone)]
struct Slab {
    id: &'static str,
    /// Center of the footprint in plane coordinates (a, b), meters.
    center: (f64, f64),
    /// Footprint half-extents along (a, b).
    half: (f64, f64),
    /// Top-face height above the plane.
    height: f64,
}

impl Slab {
    fn top_center(&self) -> Vector3<f64> {
        plane_origin()
            + axis_a() * self.center.0
            + axis_b() * self.center.1
            + up() * self.height
    }
}

/// Depth along the ray through pixel (x, y) to the plane `dot(p, n) = c`.
fn ray_plane_depth(x: f64, y: f64, c: f64) -> Option<f64> {
    let dir = Vector3::new((x - CAMERA.cx) / CAMERA.fx, (y - CAMERA.cy) / CAMERA.fy, 1.0);
    let denom = dir.dot(&normal());
    (denom > 1e-9).then(|| c / denom)
}

/// Whether the plane point at (pixel, depth) falls inside a slab footprint.
fn inside_footprint(point: Vector3<f64>, slab: &Slab) -> bool {
    let rel = point - slab.top_center();
    rel.dot(&axis_a()).abs() <= slab.half.0 && rel.dot(&axis_b()).abs() <= slab.half.1
}

/// Renders the scene depth map and one mask per slab by nearest-surface ray
/// casting (slab top faces over the support plane).
fn render(slabs: &[Slab]) -> (Tensor, Vec<Tensor>) {
    let (h, w) = (CAMERA.height, CAMERA.width);
    let mut depth = vec![0.0f64; h * w];
    let mut masks = vec![vec![0.0f64; h * w]; slabs.len()];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let mut best = ray_plane_depth(xf, yf, PLANE_OFFSET).unwrap_or(f64::INFINITY);
            let mut owner: Option<usize> = None;
            for (i, slab) in slabs.iter().enumerate() {
                let c = PLANE_OFFSET - slab.height;
                if let Some(t) = ray_plane_depth(xf, yf, c) {
                    let dir =
                        Vector3::new((xf - CAMERA.cx) / CAMERA.fx, (yf - CAMERA.cy) / CAMERA.fy, 1.0);
                    if inside_footprint(dir * t, slab) && t < best {
                        best = t;
                        owner = Some(i);
                    }
                }
            }
            depth[y * w + x] = best;
            if let Some(i) = owner {
                masks[i][y * w + x] = 1.0;
            }
        }
    }
    let depth_t = Tensor::from_f64(vec![h, w], &depth).expect("depth shape");
    let mask_ts = masks
        .into_iter()
        .map(|m| Tensor::from_f64(vec![h, w], &m).expect("mask shape"))
        .collect();
    (depth_t, mask_ts)
}

/// Samples entity keypoints from a rendered mask and back-projects them
/// through the rendered depth: 4 axis extrema plus one interior point.
fn keypoints_from_mask(mask: &Tensor, depth: &Tensor, seed: u64) -> Vec<[f64; 3]> {
    let pixels = sample_keypoints(mask, 1, seed).expect("slab masks are non-empty");
    pixels
        .iter()
        .map(|px| {
            let d = f64::from(depth.at2(px.y as usize, px.x as usize));
            let p = back_project(Vector2::new(px.x, px.y), d, &CAMERA).expect("interior pixel");
            [p.x, p.y, p.z]
        })
        .collect()
}

/// A fully built archetype: scene, constraints, and rendered rasters.
#[derive(Debug, Clone)]
pub struct TaskBuild {
    pub template: TaskTemplate,
    pub scene: SceneDoc,
    pub constraints: ConstraintSet,
    pub depth: Tensor,
    /// Entity masks in entity order.
    pub masks: Vec<(String, Tensor)>,
}

fn slabs_for(template: TaskTemplate) -> Vec<Slab> {
    let slab = |id, center, half, height| Slab { id, center, half, height };
    match template {
        // Grasped entity first, then the template target, then extras.
        TaskTemplate::Stack => vec![
            slab("green_block", (-0.10, 0.08), (0.025, 0.025), 0.05),
            slab("red_block", (0.10, -0.06), (0.03, 0.03), 0.05),
        ],
        TaskTemplate::Press => vec![
            slab("stapler", (0.0, 0.02), (0.045, 0.025), 0.04),
            slab("paper_stack", (0.13, -0.08), (0.03, 0.035), 0.01),
        ],
        TaskTemplate::Hammer => vec![
            slab("hammer_head", (-0.12, -0.05), (0.03, 0.022), 0.035),
            slab("nail_block", (0.08, 0.07), (0.025, 0.025), 0.03),
        ],
        TaskTemplate::Place => vec![
            slab("block", (-0.14, 0.0), (0.025, 0.025), 0.05),
            slab("target_pad", (0.14, 0.0), (0.035, 0.035), 0.005),
            slab("bottle", (0.0, 0.0), (0.02, 0.02), 0.12),
        ],
        TaskTemplate::Open => vec![
            slab("lid", (0.05, 0.0), (0.03, 0.03), 0.075),
            slab("container", (0.05, 0.0), (0.042, 0.042), 0.06),
        ],
        TaskTemplate::Pour => vec![
            slab("kettle", (-0.10, -0.04), (0.035, 0.05), 0.07),
            slab("bowl", (0.10, 0.05), (0.045, 0.045), 0.03),
        ],
    }
}

/// Builds the scene document (without constraints) for one archetype.
fn build_scene(template: TaskTemplate) -> (SceneDoc, Tensor, Vec<(String, Tensor)>) {
    let slabs = slabs_for(template);
    let (depth, mask_tensors) = render(&slabs);

    let entities: Vec<Entity> = slabs
        .iter()
        .zip(&mask_tensors)
        .enumerate()
        .map(|(i, (slab, mask))| Entity {
            id: slab.id.to_string(),
            keypoints_3d: keypoints_from_mask(
                mask,
                &depth,
                seeding::derive_seed(template as u64, "task-kp", i as u64),
            ),
            mask_path: Some(format!("masks/{}_{}.eatn", template.name(), slab.id)),
        })
        .collect();

    // Grasp: gripper frame aligned with the support plane (x in-plane,
    // z along the approach direction into the plane), positioned just above
    // the grasped object's top center.
    let rotation = Matrix3::from_columns(&[axis_a(), axis_b(), normal()]);
    let grip_point = slabs[0].top_center() + up() * 0.02;
    let grasp_transform =
        Pose::new(rotation, grip_point).expect("grasp rotation is orthonormal by construction");

    let scene = SceneDoc {
        intrinsics: CAMERA,
        entities,
        grasped_entity: slabs[0].id.to_string(),
        grasp_transform,
        workspace_aabb: [[-0.6, -0.8, 0.3], [0.6, 0.6, 1.6]],
        depth_path: format!("depth/{}_depth.eatn", template.name()),
    };
    let masks = slabs
        .iter()
        .zip(mask_tensors)
        .map(|(s, t)| (s.id.to_string(), t))
        .collect();
    (scene, depth, masks)
}

// --- expression-building helpers -------------------------------------------

fn lit(v: f64) -> ScalarExpr {
    ScalarExpr::Lit(v)
}

fn kp(i: usize) -> VecExpr {
    VecExpr::Kp(i)
}

fn cv(v: Vector3<f64>) -> VecExpr {
    VecExpr::Const3(v.x, v.y, v.z)
}

fn vsub(a: VecExpr, b: VecExpr) -> VecExpr {
    VecExpr::VSub(Box::new(a), Box::new(b))
}

fn vadd(a: VecExpr, b: VecExpr) -> VecExpr {
    VecExpr::VAdd(Box::new(a), Box::new(b))
}

fn vscale(s: f64, v: VecExpr) -> VecExpr {
    VecExpr::VScale(Box::new(lit(s)), Box::new(v))
}

fn sub(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
    ScalarExpr::Sub(Box::new(a), Box::new(b))
}

fn dot(a: VecExpr, b: VecExpr) -> ScalarExpr {
    ScalarExpr::Dot(Box::new(a), Box::new(b))
}

fn norm(v: VecExpr) -> ScalarExpr {
    ScalarExpr::Norm(Box::new(v))
}

fn abs(a: ScalarExpr) -> ScalarExpr {
    ScalarExpr::Abs(Box::new(a))
}

fn smin(a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
    ScalarExpr::Min(Box::new(a), Box::new(b))
}

/// Mean of the given keypoints.
fn centroid_expr(indices: &[usize]) -> VecExpr {
    let mut iter = indices.iter().rev();
    let mut acc = kp(*iter.next().expect("non-empty"));
    for &i in iter {
        acc = vadd(kp(i), acc);
    }
    vscale(1.0 / indices.len() as f64, acc)
}

/// Height of a point above the support plane: PLANE_OFFSET − dot(p, n).
fn height_expr(v: VecExpr) -> ScalarExpr {
    sub(lit(PLANE_OFFSET), dot(v, cv(normal())))
}

/// Horizontal (in-plane) distance between two vector expressions: the norm
/// of the difference with its out-of-plane component removed.
fn hdist_expr(a: VecExpr, b: VecExpr) -> ScalarExpr {
    let delta = vsub(a, b);
    let vertical = ScalarExpr::Dot(Box::new(delta.clone()), Box::new(cv(up())));
    norm(vsub(
        delta,
        VecExpr::VScale(Box::new(vertical), Box::new(cv(up()))),
    ))
}

fn constraint(name: &str, window: (f64, f64), expr: ScalarExpr) -> Constraint {
    Constraint {
        name: name.to_string(),
        expr: crate::constraint::ConstraintExpr::new(expr),
        window,
    }
}

fn mean_point(scene: &SceneDoc, entity: usize) -> Vector3<f64> {
    let pts: Vec<Vector3<f64>> = scene.entities[entity]
        .keypoints_3d
        .iter()
        .map(|k| Vector3::new(k[0], k[1], k[2]))
        .collect();
    pts.iter().sum::<Vector3<f64>>() / pts.len() as f64
}

fn height_of(p: Vector3<f64>) -> f64 {
    PLANE_OFFSET - p.dot(&normal())
}

/// Authors the constraint set for one archetype against its scene geometry.
fn build_constraints(template: TaskTemplate, scene: &SceneDoc) -> ConstraintSet {
    let grasped: Vec<usize> = scene.keypoint_range(0).collect();
    let target: Vec<usize> = scene.keypoint_range(1).collect();
    let g = || centroid_expr(&grasped);
    let t = || centroid_expr(&target);
    let g_c = mean_point(scene, 0);
    let t_c = mean_point(scene, 1);

    // Final-placement tolerances, meters.
    const TOL_H: f64 = 0.015;
    const TOL_V: f64 = 0.02;

    let goal_align = |name_h: &str, name_v: &str, goal_offset: Vector3<f64>, window: (f64, f64)| {
        let goal = vadd(t(), cv(goal_offset));
        let horizontal = constraint(name_h, window, sub(hdist_expr(g(), goal.clone()), lit(TOL_H)));
        let vertical = constraint(
            name_v,
            window,
            sub(abs(dot(vsub(g(), goal), cv(up()))), lit(TOL_V)),
        );
        (horizontal, vertical)
    };

    let above_table = constraint(
        "above_table",
        (0.0, 1.0),
        sub(lit(-0.01), height_expr(g())),
    );

    let constraints = match template {
        TaskTemplate::Stack => {
            let (h, v) = goal_align("place_horizontal", "place_vertical", up() * 0.05, (0.85, 1.0));
            // During the transfer the moving block keeps clearance above its
            // final height.
            let goal_h = height_of(t_c + up() * 0.05);
            let approach = constraint(
                "approach_from_above",
                (0.45, 0.68),
                sub(lit(goal_h + 0.02), height_expr(g())),
            );
            vec![h, v, approach, above_table]
        }
        TaskTemplate::Press => {
            let start_h = height_of(g_c);
            let pressed = constraint(
                "pressed_down",
                (0.85, 1.0),
                sub(height_expr(g()), lit(start_h - 0.02)),
            );
            let centered = constraint(
                "stay_centered",
                (0.0, 1.0),
                sub(hdist_expr(g(), cv(g_c)), lit(0.02)),
            );
            vec![pressed, centered, above_table]
        }
        TaskTemplate::Hammer => {
            let (h, v) = goal_align("strike_horizontal", "strike_vertical", up() * 0.04, (0.85, 1.0));
            let start_h = height_of(g_c);
            let windup = constraint(
                "wind_up",
                (0.25, 0.5),
                sub(lit(start_h + 0.06), height_expr(g())),
            );
            vec![h, v, windup, above_table]
        }
        TaskTemplate::Place => {
            let (h, v) = goal_align("place_horizontal", "place_vertical", up() * 0.05, (0.9, 1.0));
            // Obstacle clearance: violated only when simultaneously inside
            // the horizontal safety radius and below the obstacle top.
            let obstacle: Vec<usize> = scene.keypoint_range(2).collect();
            let o_c = mean_point(scene, 2);
            // Keep-out slab around the bottle: while below the bottle top,
            // the carried block must keep a margin along the approach axis.
            // The violation is scaled up so the penalty wall dominates the
            // goal pull: a trajectory pushed straight at the pad stalls at
            // the wall instead of grinding through, and the only way past
            // is over the top, where the vertical branch of the min is
            // already satisfied. The window reaches the final frame; the
            // pad itself sits well outside the margin.
            let along_a = abs(dot(
                vsub(g(), centroid_expr(&obstacle)),
                cv(axis_a()),
            ));
            let wall = ScalarExpr::Mul(
                Box::new(lit(4.0)),
                Box::new(sub(lit(0.06), along_a)),
            );
            let below_top = sub(lit(height_of(o_c) + 0.02), height_expr(g()));
            let clear = constraint("clear_obstacle", (0.1, 1.0), smin(wall, below_top));
            vec![h, v, clear, above_table]
        }
        TaskTemplate::Open => {
            let off = constraint(
                "lid_separated",
                (0.85, 1.0),
                sub(lit(0.10), hdist_expr(g(), t())),
            );
            // The lid must land at its set-down spot, not merely anywhere
            // away from the container.
            let setdown = g_c + up() * 0.02 + axis_a() * 0.15;
            let at_setdown = constraint(
                "lid_at_setdown",
                (0.85, 1.0),
                sub(hdist_expr(g(), cv(setdown)), lit(TOL_H)),
            );
            let start_h = height_of(g_c);
            let lift_first = constraint(
                "lift_before_slide",
                (0.25, 0.5),
                sub(lit(start_h + 0.04), height_expr(g())),
            );
            vec![off, at_setdown, lift_first, above_table]
        }
        TaskTemplate::Pour => {
            let hover = constraint(
                "over_bowl",
                (0.7, 1.0),
                sub(hdist_expr(g(), t()), lit(0.025)),
            );
            // Tilt: rotating about the in-plane a-axis turns the grasped
            // top face's b-extent into a height spread between the extreme
            // keypoints. Required spread is 60% of the nominal final value.
            let plan = crate::rollout::nominal_plan(scene, template, 16).expect("pour plan");
            let final_pose = plan.object_poses.last().expect("non-empty plan");
            let coords: Vec<(usize, f64)> = grasped
                .iter()
                .map(|&i| {
                    let p = scene.initial_keypoints()[i];
                    (i, (p - g_c).dot(&axis_b()))
                })
                .collect();
            let lo = coords
                .iter()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty")
                .0;
            let hi = coords
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty")
                .0;
            let spread_at = |pose: &Pose| {
                let initial = scene.initial_keypoints();
                let a = crate::geometry::apply(pose, initial[hi]);
                let b = crate::geometry::apply(pose, initial[lo]);
                height_of(a) - height_of(b)
            };
            let nominal_spread = spread_at(final_pose);
            let spread = sub(height_expr(kp(hi)), height_expr(kp(lo)));
            let tilted = if nominal_spread >= 0.0 {
                constraint("tilted", (0.92, 1.0), sub(lit(0.4 * nominal_spread), spread))
            } else {
                constraint(
                    "tilted",
                    (0.92, 1.0),
                    sub(spread, lit(0.4 * nominal_spread)),
                )
            };
            let upright = constraint(
                "upright_during_transfer",
                (0.0, 0.5),
                sub(abs(sub(height_expr(kp(hi)), height_expr(kp(lo)))), lit(0.04)),
            );
            vec![hover, tilted, upright, above_table]
        }
    };

    ConstraintSet::new(constraints).expect("authored constraint names are unique")
}

/// Builds scene, constraints, depth, and masks for one archetype.
/// Deterministic: identical output on every call.
pub fn build_task(template: TaskTemplate) -> TaskBuild {
    let (scene, depth, masks) = build_scene(template);
    scene.validate().expect("authored scenes validate");
    let constraints = build_constraints(template, &scene);
    constraints
        .clone()
        .bind(&scene)
        .expect("authored constraints bind to their scene");
    TaskBuild {
        template,
        scene,
        constraints,
        depth,
        masks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::aggregate_cost;
    use crate::rollout::{generate_rollout, HallucinationSpec, NoiseSpec};

    #[test]
    fn all_tasks_build_and_validate() {
        for template in TaskTemplate::ALL {
            let build = build_task(template);
            assert!(build.scene.entities.len() >= 2, "{template}");
            assert!(build.scene.total_keypoints() >= 6, "{template}");
            assert_eq!(build.masks.len(), build.scene.entities.len());
            // Deterministic reconstruction.
            let again = build_task(template);
            assert_eq!(
                build.scene.initial_keypoints(),
                again.scene.initial_keypoints()
            );
        }
    }

    #[test]
    fn keypoints_lie_on_rendered_surfaces() {
        for template in TaskTemplate::ALL {
            let build = build_task(template);
            for (e, entity) in build.scene.entities.iter().enumerate() {
                for kp in &entity.keypoints_3d {
                    let p = Vector3::new(kp[0], kp[1], kp[2]);
                    let px = crate::geometry::project(p, &CAMERA).unwrap();
                    // Projection lands on an integer sample point.
                    assert!((px.x - px.x.round()).abs() < 1e-9, "{template}/{e}");
                    assert!((px.y - px.y.round()).abs() < 1e-9, "{template}/{e}");
                    let d = f64::from(
                        build.depth.at2(px.y.round() as usize, px.x.round() as usize),
                    );
                    assert!((d - p.z).abs() < 1e-6, "{template}/{e}: {d} vs {}", p.z);
                }
            }
        }
    }

    #[test]
    fn nominal_motion_satisfies_authored_constraints() {
        // Margins must survive any reasonable frame grid, not just the
        // default horizon.
        for template in TaskTemplate::ALL {
            let build = build_task(template);
            for t_len in [8, 12, 16, 24, 33] {
                let gen = generate_rollout(
                    &build.scene,
                    template,
                    &HallucinationSpec::none(1),
                    &NoiseSpec::noiseless(),
                    t_len,
                )
                .unwrap();
                let cost = aggregate_cost(&build.constraints, &gen.gt_keypoints).unwrap();
                assert!(
                    cost < 1e-10,
                    "{template} at T={t_len}: nominal motion violates constraints, cost = {cost:e}"
                );
            }
        }
    }

    #[test]
    fn misplaced_motion_violates_constraints() {
        use crate::rollout::HallucinationMode;
        for template in TaskTemplate::ALL {
            let build = build_task(template);
            let gen = generate_rollout(
                &build.scene,
                template,
                &HallucinationSpec {
                    mode: HallucinationMode::Misplacement,
                    magnitude: 0.10,
                    onset_frac: 0.25,
                    seed: 3,
                },
                &NoiseSpec::noiseless(),
                16,
            )
            .unwrap();
            let cost = aggregate_cost(&build.constraints, &gen.gt_keypoints).unwrap();
            assert!(cost > 1e-2, "{template}: misplacement cost only {cost:e}");
        }
    }

    #[test]
    fn constraint_files_round_trip_textually() {
        for template in TaskTemplate::ALL {
            let build = build_task(template);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.json");
            crate::tensorio::save_constraints(&build.constraints, &path).unwrap();
            let loaded = crate::tensorio::load_constraints(&path).unwrap();
            assert_eq!(loaded, build.constraints, "{template}");
        }
    }
}
