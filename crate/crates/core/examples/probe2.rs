use keyalign::harness::{RunConfig};
use keyalign::optimize::{solve, OptProblem};
use keyalign::retarget::gripper_keypoints;
use keyalign::rollout::TaskTemplate;
use keyalign::tasks::build_task;

fn main() {
    let build = build_task(TaskTemplate::Place);
    let cfg = RunConfig::default();
    let scene = &build.scene;
    let bound = build.constraints.clone().bind(scene).unwrap();
    let init = vec![scene.grasp_transform; cfg.frames];
    let mut prob = OptProblem::new(init, bound, scene.clone(), 0.0);
    prob.params = cfg.solver.params();
    let out = solve(&prob).unwrap();
    println!("converged={} iters={}", out.converged, out.iterations);
    for row in out.trace.iter().step_by(20) {
        println!("  it {:>4}: obj {:.6e} viol {:.4e}", row.iteration, row.objective, row.max_violation);
    }
    let last = out.trace.last().unwrap();
    println!("  final: obj {:.6e} viol {:.4e}", last.objective, last.max_violation);
    // where did the final frame's grasped centroid end up?
    let grasped: Vec<usize> = scene.keypoint_range(scene.grasped_index()).collect();
    for t in [0, 8, 14, 15] {
        let cfg_t = gripper_keypoints(&out.trajectory[t], scene);
        let c: nalgebra::Vector3<f64> = grasped.iter().map(|&j| cfg_t.point(j)).sum::<nalgebra::Vector3<f64>>() / grasped.len() as f64;
        println!("  frame {t}: grasped centroid = ({:.3}, {:.3}, {:.3})", c.x, c.y, c.z);
    }
    let (ok, viol) = keyalign::harness::episode_success(&out.trajectory, scene, &build.constraints, cfg.success_threshold).unwrap();
    println!("success={ok} violation={viol:.4e}");
}
