use keyalign::harness::{run_ablation, run_episode, RunConfig, Variant};
use keyalign::rollout::{NoiseSpec, TaskTemplate};
use keyalign::tasks::build_task;

fn main() {
    let episodes: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let track: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let depth: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.002);
    let mut cfg = RunConfig::default();
    cfg.noise = NoiseSpec { track_sigma_px: track, depth_alpha_true: 2.0, depth_beta_true: 0.5, depth_sigma: depth };
    let table = run_ablation(&cfg, &Variant::ALL, &TaskTemplate::ALL, episodes, 2);
    println!("track_sigma={track} depth_sigma={depth} ({episodes} eps):");
    for v in Variant::ALL {
        let mut row = format!("{:>17}", v.name());
        for t in TaskTemplate::ALL {
            row += &format!(" {:>5.2}", table.rate(v, t).unwrap());
        }
        row += &format!(" | mean {:.3}", table.mean_rate(v));
        println!("{row}");
    }
    // selection filtering check: how often does plus_selection pick a hallucinated rollout?
    let sel: Vec<_> = table.records.iter().filter(|r| r.variant == "plus_selection").collect();
    let miss = sel.iter().filter(|r| r.selected_mode.as_deref().is_some_and(|m| m != "none")).count();
    println!("selection miss rate: {}/{}", miss, sel.len());
    // why does plus_opt fail, when it does
    for r in table.records.iter().filter(|r| !r.success && r.variant == "plus_opt").take(8) {
        println!("  opt-fail {} ep{} mode={:?} viol={:.3e} conv={:?} err={:?}", r.task, r.episode, r.selected_mode, r.final_violation, r.optimizer_converged, r.error);
    }
    // constraints_only on place detail
    let place_co = table.records.iter().filter(|r| r.variant=="constraints_only" && r.task=="place").collect::<Vec<_>>();
    let ok = place_co.iter().filter(|r| r.success).count();
    println!("constraints_only place: {}/{}", ok, place_co.len());
    let _ = run_episode(&build_task(TaskTemplate::Place), &cfg, Variant::ConstraintsOnly, 0);
}
